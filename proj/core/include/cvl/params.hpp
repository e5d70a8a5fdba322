#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvl/tape.hpp"
#include "cvl/tensor.hpp"

namespace cvl {

template <typename T>
struct param_entry {
    std::shared_ptr<tensor<T>> value;
    bool trainable = true;
};

// Ordered name -> parameter map. Names are hierarchical dot paths
// ("stage3.block12.dwconv.weight"); ordering makes serialization and
// iteration deterministic.
template <typename T>
struct named_params {
    std::map<std::string, param_entry<T>> entries;

    std::shared_ptr<tensor<T>> add(const std::string & name, tensor<T> value) {
        check(entries.find(name) == entries.end(), "params: duplicate name '" + name + "'");
        auto p = std::make_shared<tensor<T>>(std::move(value));
        entries.emplace(name, param_entry<T>{p, true});
        return p;
    }

    bool has(const std::string & name) const { return entries.find(name) != entries.end(); }

    tensor<T> & at(const std::string & name) {
        auto it = entries.find(name);
        check(it != entries.end(), "params: unknown name '" + name + "'");
        return *it->second.value;
    }

    const tensor<T> & at(const std::string & name) const {
        auto it = entries.find(name);
        check(it != entries.end(), "params: unknown name '" + name + "'");
        return *it->second.value;
    }

    param_entry<T> & entry(const std::string & name) {
        auto it = entries.find(name);
        check(it != entries.end(), "params: unknown name '" + name + "'");
        return it->second;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto & [name, e] : entries) {
            n += e.value->numel();
        }
        return n;
    }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto & [name, e] : entries) {
            if (e.trainable) {
                n += e.value->numel();
            }
        }
        return n;
    }

    void set_trainable_all(bool t) {
        for (auto & [name, e] : entries) {
            e.trainable = t;
        }
    }
};

// Lazily materializes tape leaves for parameters of one map, so each
// parameter appears on the tape at most once per forward pass.
template <typename T>
struct tape_binding {
    tape<T> * tp = nullptr;
    named_params<T> * params = nullptr;
    std::unordered_map<std::string, typename tape<T>::id> leaves;

    tape_binding(tape<T> & t, named_params<T> & p) : tp(&t), params(&p) {}

    typename tape<T>::id use(const std::string & name) {
        auto it = leaves.find(name);
        if (it != leaves.end()) {
            return it->second;
        }
        const typename tape<T>::id n = tp->leaf(params->entry(name).value);
        leaves.emplace(name, n);
        return n;
    }
};

// Gradient of the last backward() per parameter. Parameters that never
// made it onto the tape get a zero gradient and a tape warning.
template <typename T>
std::map<std::string, tensor<T>> collect_gradients(tape<T> & tp, const tape_binding<T> & bind) {
    std::map<std::string, tensor<T>> out;
    for (const auto & [name, e] : bind.params->entries) {
        auto it = bind.leaves.find(name);
        if (it == bind.leaves.end()) {
            tp.warnings().push_back("grad: parameter '" + name +
                                    "' is not on the tape, returning zero gradient");
            out.emplace(name, tensor<T>(e.value->shape));
        } else {
            out.emplace(name, tp.grad(it->second));
        }
    }
    return out;
}

}  // namespace cvl
