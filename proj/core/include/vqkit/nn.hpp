#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vqkit/autodiff.hpp"
#include "vqkit/tensor.hpp"

namespace vqkit {

enum class Activation { identity, tanh, relu };

struct DenseLayer {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

/// Dense stack; `hidden` is applied after every layer but the last. An empty Mlp is the identity.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths, Activation hidden, std::uint64_t seed);
  Mlp(std::vector<DenseLayer> layers, Activation hidden);

  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  Activation hidden_activation() const noexcept { return hidden_; }

  /// Weight and bias leaves in layer order.
  std::vector<ad::Var> register_parameters(ad::Tape& tape) const;
  /// Forward pass reusing leaves from register_parameters(); several passes may share them.
  ad::Var forward(ad::Tape& tape, ad::Var x, const std::vector<ad::Var>& params) const;

  /// Weight/bias tensors in the same order forward() registers them.
  std::vector<Tensor*> parameters();

 private:
  std::vector<DenseLayer> layers_;
  Activation hidden_ = Activation::tanh;
};

struct Autoencoder {
  Mlp encoder;
  Mlp decoder;

  /// 16 -> 32 -> 8 encoder and 8 -> 32 -> 16 decoder, tanh hidden units, linear outputs.
  static Autoencoder make_default(std::uint64_t seed, std::size_t input_dim = 16, std::size_t hidden = 32,
                                  std::size_t code_dim = 8);
};

}  // namespace vqkit
