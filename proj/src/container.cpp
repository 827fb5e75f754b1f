#include "container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "pvlab/errors.hpp"

namespace pvlab::detail {

const std::string& Container::value(const std::string& key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return v;
  }
  throw FormatError("container: missing header key '" + key + "'", 0);
}

const Matrix& Container::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw FormatError("container: missing tensor '" + name + "'", 0);
}

void write_container(const std::filesystem::path& path, const std::string& magic, const Container& c) {
  std::ostringstream head;
  head << magic;
  for (const auto& [k, v] : c.header) head << k << ": " << v << '\n';
  std::size_t offset = 0;
  for (const auto& [name, m] : c.tensors) {
    head << "tensor: " << name << ' ' << m.rows() << ' ' << m.cols() << ' ' << offset << '\n';
    offset += m.size() * 4;
  }
  head << '\n';

  std::string payload;
  payload.reserve(offset);
  for (const auto& [name, m] : c.tensors) {
    for (float f : m.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  const std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path& path, const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.compare(0, magic.size(), magic) != 0) {
    throw FormatError("bad magic in '" + path.string() + "'", 0);
  }
  std::size_t pos = magic.size();
  Container c;
  struct Entry {
    std::string name;
    std::size_t rows, cols, offset, line_offset;
  };
  std::vector<Entry> entries;
  bool terminated = false;
  while (pos < bytes.size()) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string::npos) throw FormatError("unterminated header line", pos);
    const std::string line = bytes.substr(pos, eol - pos);
    const std::size_t line_offset = pos;
    pos = eol + 1;
    if (line.empty()) {
      terminated = true;
      break;
    }
    const std::size_t colon = line.find(": ");
    if (colon == std::string::npos) throw FormatError("malformed header line '" + line + "'", line_offset);
    const std::string key = line.substr(0, colon);
    const std::string value = line.substr(colon + 2);
    if (key == "tensor") {
      std::istringstream ss(value);
      Entry e{};
      e.line_offset = line_offset;
      if (!(ss >> e.name >> e.rows >> e.cols >> e.offset)) {
        throw FormatError("malformed tensor entry '" + value + "'", line_offset);
      }
      entries.push_back(e);
    } else {
      c.header.emplace_back(key, value);
    }
  }
  if (!terminated) throw FormatError("header not terminated by a blank line", pos);

  const std::size_t payload_start = pos;
  const std::size_t payload_size = bytes.size() - payload_start;
  std::size_t expected_end = 0;
  for (const auto& e : entries) {
    const std::size_t nbytes = e.rows * e.cols * 4;
    if (e.offset + nbytes > payload_size) {
      throw FormatError("tensor '" + e.name + "' runs past end of payload (truncated file)",
                        payload_start + std::min(payload_size, e.offset));
    }
    expected_end = std::max(expected_end, e.offset + nbytes);
    std::vector<float> data(e.rows * e.cols);
    const char* src = bytes.data() + payload_start + e.offset;
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
      }
      data[i] = std::bit_cast<float>(bits);
    }
    c.tensors.emplace_back(e.name, Matrix(e.rows, e.cols, std::move(data)));
  }
  if (expected_end != payload_size) {
    throw FormatError("payload has " + std::to_string(payload_size - expected_end) + " trailing bytes",
                      payload_start + expected_end);
  }
  return c;
}

}  // namespace pvlab::detail
