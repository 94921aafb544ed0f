#pragma once

// Sinusoidal positional encoding: x -> [x, sin(2^k pi x), cos(2^k pi x)]
// for k = 0..num_bands-1, applied per input component. Inputs are expected
// in the normalized scene cube [-1, 1].

#include <cmath>
#include <vector>

#include "sdfrecon/autodiff.hpp"
#include "sdfrecon/core.hpp"

namespace sdfrecon {

struct EncodingConfig {
    int num_bands = 8;
    bool include_input = true;
    int input_dim = 3;

    int output_dim() const { return input_dim * ((include_input ? 1 : 0) + 2 * num_bands); }

    void validate() const {
        if (num_bands < 0) throw UsageError("encoding: num_bands must be >= 0");
        if (input_dim <= 0) throw UsageError("encoding: input_dim must be positive");
    }
};

// Differentiable encoding of an (n x input_dim) node. Layout: raw input block
// (when included), then per band the sin block followed by the cos block.
template <class T>
typename Tape<T>::Ref encode(Tape<T>& tape, typename Tape<T>::Ref x, const EncodingConfig& cfg) {
    cfg.validate();
    if (tape.value(x).cols() != cfg.input_dim)
        throw DataError("encode: input has " + std::to_string(tape.value(x).cols()) +
                        " columns, config expects " + std::to_string(cfg.input_dim));
    std::vector<typename Tape<T>::Ref> parts;
    if (cfg.include_input) parts.push_back(x);
    for (int k = 0; k < cfg.num_bands; ++k) {
        const T freq = static_cast<T>(std::ldexp(M_PI, k));  // 2^k * pi
        auto scaled = tape.scale_add(x, freq, T(0));
        parts.push_back(tape.sin_(scaled));
        parts.push_back(tape.cos_(scaled));
    }
    if (parts.size() == 1) return parts[0];
    return tape.concat_cols(parts);
}

// Plain (non-taped) encoding of row vectors, for tests and inference helpers.
template <class T>
MatX<T> encode_plain(const MatX<T>& x, const EncodingConfig& cfg) {
    cfg.validate();
    Tape<T> tape(nullptr, false);
    auto node = tape.constant(x);
    return tape.value(encode(tape, node, cfg));
}

}  // namespace sdfrecon
