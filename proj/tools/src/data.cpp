#include <algorithm>
#include <cmath>

#include "vqkit/errors.hpp"
#include "vqkit_tools/experiments.hpp"

namespace vqkit::tools {

Tensor gen_mixture(const MixtureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Tensor out(spec.samples, spec.dim);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const double u = uniform01(rng);
    std::size_t k = spec.components.size() - 1;
    double running = 0.0;
    for (std::size_t c = 0; c < spec.components.size(); ++c) {
      running += spec.components[c].weight;
      if (u < running) {
        k = c;
        break;
      }
    }
    const MixtureComponent& comp = spec.components[k];
    const double sd = std::sqrt(comp.scale);
    for (std::size_t j = 0; j < spec.dim; ++j) out(i, j) = comp.mean[j] + sd * standard_normal(rng);
  }
  return out;
}

MixtureSpec resolve_mixture(const DataSpec& data, std::uint64_t seed) {
  if (data.mixture) return *data.mixture;
  MixtureSpec spec;
  spec.dim = data.dim;
  spec.samples = data.samples;
  Rng rng(derive_seed(seed, 0xda7a));
  for (std::size_t c = 0; c < data.components; ++c) {
    MixtureComponent comp;
    comp.scale = data.scale;
    comp.weight = 1.0 / static_cast<double>(data.components);
    for (std::size_t j = 0; j < data.dim; ++j) comp.mean.push_back(data.spread * standard_normal(rng));
    spec.components.push_back(std::move(comp));
  }
  return spec;
}

Tensor make_dataset(const DataSpec& data, std::uint64_t seed) {
  Tensor x = gen_mixture(resolve_mixture(data, seed), derive_seed(seed, 0xda7b));
  if (data.relu)
    for (double& v : x.values()) v = std::max(v, 0.0);
  return x;
}

}  // namespace vqkit::tools
