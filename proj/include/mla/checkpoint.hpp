#pragma once

#include <filesystem>

#include "mla/tensor.hpp"

namespace mla {

// Flat binary checkpoint: magic "MLA1", then per tensor
//   u32 name length, UTF-8 name, u32 rank, u64 extents..., f64 data...
// all little-endian.
void save_checkpoint(const std::filesystem::path& path, const ParameterList& tensors);

// Every tensor in file order, as plain (non-tape) tensors.
ParameterList read_checkpoint(const std::filesystem::path& path);

// Copies values into the tensors of `into` by name. Every name in `into`
// must be present with an identical shape; extra names in the file are
// ignored.
void load_checkpoint_into(const std::filesystem::path& path, const ParameterList& into);

}  // namespace mla
