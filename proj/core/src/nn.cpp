#include "vqkit/nn.hpp"

#include <cmath>

#include "vqkit/errors.hpp"
#include "vqkit/rng.hpp"

namespace vqkit {

Mlp::Mlp(const std::vector<std::size_t>& widths, Activation hidden, std::uint64_t seed) : hidden_(hidden) {
  require(widths.size() >= 2, "Mlp needs at least input and output widths");
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer{Tensor(widths[l], widths[l + 1]), Tensor(1, widths[l + 1])};
    const double sd = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    for (double& w : layer.weight.values()) w = sd * standard_normal(rng);
    layers_.push_back(std::move(layer));
  }
}

Mlp::Mlp(std::vector<DenseLayer> layers, Activation hidden) : layers_(std::move(layers)), hidden_(hidden) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    require(layers_[l].bias.rows() == 1 && layers_[l].bias.cols() == layers_[l].weight.cols(),
            "Mlp layer bias shape mismatch");
    if (l > 0)
      require(layers_[l].weight.rows() == layers_[l - 1].weight.cols(), "Mlp layer widths do not chain");
  }
}

std::vector<ad::Var> Mlp::register_parameters(ad::Tape& tape) const {
  std::vector<ad::Var> params;
  for (const auto& layer : layers_) {
    params.push_back(tape.parameter(layer.weight));
    params.push_back(tape.parameter(layer.bias));
  }
  return params;
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x, const std::vector<ad::Var>& params) const {
  require(params.size() == 2 * layers_.size(), "Mlp::forward: parameter count mismatch");
  ad::Var h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = ad::add(tape, ad::matmul(tape, h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 == layers_.size()) break;
    if (hidden_ == Activation::tanh) h = ad::tanh(tape, h);
    else if (hidden_ == Activation::relu) h = ad::relu(tape, h);
  }
  return h;
}

std::vector<Tensor*> Mlp::parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  return out;
}

Autoencoder Autoencoder::make_default(std::uint64_t seed, std::size_t input_dim, std::size_t hidden,
                                      std::size_t code_dim) {
  return Autoencoder{Mlp({input_dim, hidden, code_dim}, Activation::tanh, derive_seed(seed, 1)),
                     Mlp({code_dim, hidden, input_dim}, Activation::tanh, derive_seed(seed, 2))};
}

}  // namespace vqkit
