#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvl {

// Process-wide toggles. Not thread-safe to mutate while ops run.
struct runtime_options {
    // Validate that every op output is free of NaN/Inf. On by default;
    // benchmarks may switch it off.
    bool finite_checks = true;
    // Force reductions that mix samples (batch loss) into a fixed,
    // order-invariant summation.
    bool deterministic = false;
    // Record multiply-accumulate counts for conv ops (see flop_counter).
    bool count_macs = false;
};

runtime_options & options();

[[noreturn]] void fail(const std::string & msg);

inline void check(bool cond, const std::string & msg) {
    if (!cond) {
        fail(msg);
    }
}

int64_t numel_of(const std::vector<int64_t> & shape);
std::string shape_str(const std::vector<int64_t> & shape);

// Dense row-major tensor. Images use NCHW layout: (batch, channels,
// height, width). Rank 0 (empty shape) is a scalar with one element.
template <typename T>
struct tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    tensor() = default;

    explicit tensor(std::vector<int64_t> s)
        : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), T(0)) {}

    tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        check(numel_of(shape) == static_cast<int64_t>(data.size()),
              "tensor: shape " + shape_str(shape) + " does not match buffer of " +
                  std::to_string(data.size()) + " elements");
    }

    static tensor scalar(T v) {
        tensor t;
        t.data.assign(1, v);
        return t;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t size(int i) const { return shape[static_cast<size_t>(i)]; }

    T * ptr() { return data.data(); }
    const T * ptr() const { return data.data(); }

    T & operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T & operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const tensor & o) const { return shape == o.shape; }

    void fill(T v) { data.assign(data.size(), v); }
};

using tensor_f32 = tensor<float>;
using tensor_f64 = tensor<double>;

// Throws when t contains NaN or Inf; op_name goes into the message.
template <typename T>
void check_finite(const tensor<T> & t, const char * op_name);

// Per-conv-op multiply-accumulate records, used to cross-check the
// analytic cost model against what the conv kernels actually execute.
struct flop_counter {
    struct record {
        bool depthwise;  // groups == in_channels == out_channels
        uint64_t macs;
    };
    std::vector<record> records;

    void reset() { records.clear(); }
    uint64_t total_macs() const;
};

flop_counter & macs_counter();

}  // namespace cvl
