#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvl/params.hpp"
#include "cvl/tensor.hpp"

namespace cvl::checkpoint {

// File layout (little-endian):
//   magic   "CVLV"
//   version u32 (currently 1)
//   count   u32
//   entries, sorted by name:
//     name_len u32, name bytes (utf-8)
//     dtype    u8  (0 = f32, 1 = f64)
//     rank     u32
//     dims     u32 * rank
//     payload  raw little-endian scalars
constexpr uint32_t k_version = 1;

enum class dtype : uint8_t { f32 = 0, f64 = 1 };

struct entry {
    dtype type = dtype::f32;
    std::vector<uint32_t> dims;
    std::vector<float> f32_data;
    std::vector<double> f64_data;

    int64_t numel() const;
};

using entry_map = std::map<std::string, entry>;  // key order == file order

void save(const entry_map & entries, const std::string & path);
entry_map load(const std::string & path);

// Typed helpers over named parameter maps. Loading requires the file to
// carry exactly the model's names, shapes, and scalar type; on any
// mismatch the model is left untouched.
template <typename T>
entry_map to_entries(const named_params<T> & params);

template <typename T>
void save_params(const named_params<T> & params, const std::string & path);

template <typename T>
void load_params(named_params<T> & params, const std::string & path);

// FNV-1a over the serialized bytes; handy for determinism checks.
uint64_t file_hash(const std::string & path);

}  // namespace cvl::checkpoint
