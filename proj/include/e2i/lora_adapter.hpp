#pragma once

#include <map>
#include <string>

#include "e2i/common.hpp"

namespace e2i {

// Low-rank update attached to one frozen weight W0 (d_out x d_in):
// y = W0 x + scale * B (A x), scale = alpha / r.
template <typename T>
struct LoraAdapter {
    Mat<T> a;  // r x d_in
    Mat<T> b;  // d_out x r
    T scale = T(1);

    int rank() const { return static_cast<int>(a.rows()); }
    std::size_t parameter_count() const { return static_cast<std::size_t>(a.size() + b.size()); }

    template <typename U>
    LoraAdapter<U> cast() const {
        return {a.template cast<U>(), b.template cast<U>(), static_cast<U>(scale)};
    }
};

// Keyed by the frozen base weight name ("block0.attn.q").
template <typename T>
using AdapterMap = std::map<std::string, LoraAdapter<T>>;

template <typename T>
AdapterMap<T> cast_adapters(const AdapterMap<float>& in) {
    AdapterMap<T> out;
    for (const auto& [name, ad] : in) {
        out.emplace(name, ad.template cast<T>());
    }
    return out;
}

}  // namespace e2i
