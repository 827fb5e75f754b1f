#pragma once

// Shared on-disk container for checkpoints and decompositions:
//   <magic line>
//   key: value            (one pair per line)
//   tensor: <name> <rows> <cols> <byte-offset>
//   <blank line>
//   row-major little-endian float32 payloads, offsets relative to payload start

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pvlab/numerics.hpp"

namespace pvlab::detail {

struct Container {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const std::string& value(const std::string& key) const;
  const Matrix& tensor(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const std::string& magic, const Container& c);
Container read_container(const std::filesystem::path& path, const std::string& magic);

}  // namespace pvlab::detail
