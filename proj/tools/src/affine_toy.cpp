#include <cmath>

#include "vqkit/errors.hpp"
#include "vqkit_tools/experiments.hpp"

namespace vqkit::tools {
namespace {

double norm_of_difference(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> column_means(const Tensor& t) {
  const Tensor m = column_mean(t);
  return {m.values().begin(), m.values().end()};
}

AffineVariantResult run_variant(const std::string& name, AffineMode affine, const AffineToySpec& spec,
                                const Tensor& points, const Tensor& codes) {
  VQConfig vc;
  vc.num_codes = codes.rows();
  vc.alpha = 1.0;
  vc.beta = 1.0;
  vc.affine = affine;
  vc.affine_lr_scale = spec.lr_scale;
  vc.affine_momentum = spec.ema_momentum;
  VectorQuantizer vq(vc, Codebook(codes), 0);

  OptimizerConfig opt;
  opt.codebook_lr = spec.lr;
  opt.codebook_momentum = 0.0;
  OptimizerState state = OptimizerState::for_codebook(opt);

  const std::vector<double> p_mean = column_means(points);
  AffineVariantResult r;
  r.variant = name;
  auto snapshot = [&] {
    const Tensor eff = vq.codebook().effective_codes();
    r.mean_trajectory.push_back(column_means(eff));
    r.divergence.push_back(divergence(points, eff));
    r.codebooks.push_back(eff);
  };
  snapshot();
  for (std::int64_t t = 1; t <= spec.steps; ++t) {
    std::vector<std::size_t> selected;
    std::vector<double> distances;
    inner_step(vq, points, opt, state, 1.0, t, selected, distances);
    snapshot();
  }

  const Tensor& first = r.codebooks.front();
  const Tensor& last = r.codebooks.back();
  std::size_t moved = 0;
  for (std::size_t k = 0; k < first.rows(); ++k) {
    bool changed = false;
    for (std::size_t c = 0; c < first.cols(); ++c) changed = changed || first(k, c) != last(k, c);
    if (changed) ++moved;
  }
  r.fraction_moved = static_cast<double>(moved) / static_cast<double>(first.rows());
  r.fraction_unmoved = 1.0 - r.fraction_moved;
  r.initial_gap = norm_of_difference(r.mean_trajectory.front(), p_mean);
  r.final_gap = norm_of_difference(r.mean_trajectory.back(), p_mean);
  return r;
}

}  // namespace

AffineToyResult run_affine_toy(const AffineToySpec& spec, std::uint64_t seed) {
  const std::size_t d = spec.p_mean.size();
  require(spec.c_mean.size() == d, "affine toy means must share a dimension");
  MixtureSpec p{d, spec.points, {{spec.p_mean, spec.p_cov, 1.0}}};
  MixtureSpec c{d, spec.codes, {{spec.c_mean, spec.c_cov, 1.0}}};
  const Tensor points = gen_mixture(p, derive_seed(seed, 1));
  const Tensor codes = gen_mixture(c, derive_seed(seed, 2));

  AffineToyResult out;
  out.analytic_initial_gap = norm_of_difference(spec.c_mean, spec.p_mean);
  out.variants.push_back(run_variant("standard", AffineMode::off, spec, points, codes));
  out.variants.push_back(run_variant("affine_learnable", AffineMode::learnable, spec, points, codes));
  out.variants.push_back(run_variant("affine_ema", AffineMode::ema, spec, points, codes));
  return out;
}

}  // namespace vqkit::tools
