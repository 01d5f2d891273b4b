#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "evlm/tensor.hpp"

// Binary tensor container used repo-wide.
// Layout: magic bytes "ELVT", version u16, rank u16, extents u32 little-endian,
// payload f32 little-endian row-major. The reader validates magic and total
// size. Parameter sets are stored as a directory of .elvt files plus a
// manifest.json naming them.

namespace evlm::elvt {

void save(const std::string& path, const Tensor& t);
Tensor load(const std::string& path);  // materialized at the current default precision

void save_named(const std::string& dir, const std::vector<std::pair<std::string, Tensor>>& tensors,
                const nlohmann::json& meta);
std::pair<std::map<std::string, Tensor>, nlohmann::json> load_named(const std::string& dir);

}  // namespace evlm::elvt
