#include "vqkit/codebook.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include <nlohmann/json.hpp>

#include "vqkit/errors.hpp"

namespace vqkit {
namespace {

void unit_normalize(std::span<const double> in, std::span<double> out) {
  const double norm = std::sqrt(squared_norm(in));
  if (norm == 0.0) throw DegenerateInput("zero-norm vector under cosine distance");
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / norm;
}

// Queries and codes mapped into the space the distance is euclidean in.
Tensor distance_space(const Tensor& t, DistanceKind kind) {
  if (kind == DistanceKind::euclidean) return t;
  Tensor out(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) unit_normalize(t.row(r), out.row(r));
  return out;
}

void check_dims(const Tensor& queries, std::size_t dim) {
  require(queries.cols() == dim, "query dimension " + std::to_string(queries.cols()) +
                                     " does not match code dimension " + std::to_string(dim));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t take(std::size_t width) {
    require(pos_ + width <= bytes_.size(), "codebook binary is truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }
  double take_f64() { return std::bit_cast<double>(take(8)); }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string_view to_string(DistanceKind kind) {
  switch (kind) {
    case DistanceKind::euclidean:
      return "euclidean";
    case DistanceKind::cosine_unit_norm:
      return "cosine_unit_norm";
    case DistanceKind::cosine_renorm:
      return "cosine_renorm";
  }
  return "euclidean";
}

DistanceKind parse_distance_kind(std::string_view name) {
  if (name == "euclidean") return DistanceKind::euclidean;
  if (name == "cosine_unit_norm") return DistanceKind::cosine_unit_norm;
  if (name == "cosine_renorm") return DistanceKind::cosine_renorm;
  throw ContractViolation("unknown distance kind '" + std::string(name) + "'");
}

Codebook::Codebook(Tensor codes) : codes_(std::move(codes)) {
  require(codes_.rows() >= 1 && codes_.cols() >= 1, "codebook needs m >= 1 and d >= 1");
  const std::size_t m = codes_.rows();
  const std::size_t d = codes_.cols();
  affine_scale_.assign(d, 1.0);
  affine_bias_.assign(d, 0.0);
  usage_.last_used.assign(m, 0);
  usage_.total.assign(m, 0);
  moments_.mean_e.assign(d, 0.0);
  moments_.var_e.assign(d, 1.0);
  moments_.mean_q.assign(d, 0.0);
  moments_.var_q.assign(d, 1.0);
}

bool Codebook::affine_is_identity() const noexcept {
  return std::all_of(affine_scale_.begin(), affine_scale_.end(), [](double s) { return s == 1.0; }) &&
         std::all_of(affine_bias_.begin(), affine_bias_.end(), [](double b) { return b == 0.0; });
}

Tensor Codebook::effective_codes() const {
  if (affine_is_identity()) return codes_;
  Tensor out(codes_.rows(), codes_.cols());
  for (std::size_t r = 0; r < codes_.rows(); ++r)
    for (std::size_t c = 0; c < codes_.cols(); ++c)
      out(r, c) = codes_(r, c) * affine_scale_[c] + affine_bias_[c];
  return out;
}

std::vector<double> Codebook::to_raw(std::span<const double> effective) const {
  require(effective.size() == dim(), "to_raw dimension mismatch");
  std::vector<double> raw(dim());
  for (std::size_t c = 0; c < dim(); ++c) {
    const double s = affine_scale_[c];
    const double safe = std::abs(s) < 1e-12 ? (s < 0 ? -1e-12 : 1e-12) : s;
    raw[c] = (effective[c] - affine_bias_[c]) / safe;
  }
  return raw;
}

void Codebook::mark_used(std::size_t code, std::int64_t step) {
  require(code < size(), "mark_used: code index out of range");
  usage_.last_used[code] = std::max(usage_.last_used[code], step);
  ++usage_.total[code];
}

bool operator==(const Codebook& a, const Codebook& b) {
  return a.codes_ == b.codes_ && a.affine_scale_ == b.affine_scale_ &&
         a.affine_bias_ == b.affine_bias_ && a.usage_.last_used == b.usage_.last_used &&
         a.usage_.total == b.usage_.total && a.moments_.mean_e == b.moments_.mean_e &&
         a.moments_.var_e == b.moments_.var_e && a.moments_.mean_q == b.moments_.mean_q &&
         a.moments_.var_q == b.moments_.var_q;
}

double code_distance(std::span<const double> query, std::span<const double> code, DistanceKind kind) {
  if (kind == DistanceKind::euclidean) return half_squared_distance(query, code);
  std::vector<double> qn(query.size()), cn(code.size());
  unit_normalize(query, qn);
  unit_normalize(code, cn);
  return half_squared_distance(qn, cn);
}

Tensor pairwise_distances_naive(const Tensor& queries, const Tensor& codes, DistanceKind kind) {
  check_dims(queries, codes.cols());
  Tensor out(queries.rows(), codes.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i)
    for (std::size_t j = 0; j < codes.rows(); ++j)
      out(i, j) = code_distance(queries.row(i), codes.row(j), kind);
  return out;
}

Tensor pairwise_distances_chunked(const Tensor& queries, const Codebook& codebook, DistanceKind kind,
                                  std::size_t chunk_size) {
  require(chunk_size >= 1, "chunk_size must be >= 1");
  check_dims(queries, codebook.dim());
  const Tensor codes = distance_space(codebook.effective_codes(), kind);
  Tensor out(queries.rows(), codes.rows());
  std::vector<double> qn(queries.cols());
  for (std::size_t begin = 0; begin < queries.rows(); begin += chunk_size) {
    const std::size_t end = std::min(queries.rows(), begin + chunk_size);
    for (std::size_t i = begin; i < end; ++i) {
      if (kind == DistanceKind::euclidean)
        std::copy(queries.row(i).begin(), queries.row(i).end(), qn.begin());
      else
        unit_normalize(queries.row(i), qn);
      for (std::size_t j = 0; j < codes.rows(); ++j) out(i, j) = half_squared_distance(qn, codes.row(j));
    }
  }
  return out;
}

Assignment nearest_assign(const Tensor& queries, const Tensor& codes, DistanceKind kind,
                          std::size_t chunk_size) {
  require(chunk_size >= 1, "chunk_size must be >= 1");
  require(codes.rows() >= 1, "nearest_assign needs a nonempty codebook");
  check_dims(queries, codes.cols());
  const Tensor space = distance_space(codes, kind);
  Assignment out;
  out.indices.resize(queries.rows());
  out.distances.resize(queries.rows());
  std::vector<double> qn(queries.cols());
  for (std::size_t begin = 0; begin < queries.rows(); begin += chunk_size) {
    const std::size_t end = std::min(queries.rows(), begin + chunk_size);
    for (std::size_t i = begin; i < end; ++i) {
      if (kind == DistanceKind::euclidean)
        std::copy(queries.row(i).begin(), queries.row(i).end(), qn.begin());
      else
        unit_normalize(queries.row(i), qn);
      std::size_t best = 0;
      double best_distance = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < space.rows(); ++j) {
        const double d = half_squared_distance(qn, space.row(j));
        if (d < best_distance) {  // strict: lowest index wins ties
          best_distance = d;
          best = j;
        }
      }
      out.indices[i] = best;
      out.distances[i] = best_distance;
    }
  }
  return out;
}

NearestResult nearest_code(const Tensor& queries, const Codebook& codebook, DistanceKind kind,
                           std::size_t chunk_size) {
  const Tensor effective = codebook.effective_codes();
  Assignment a = nearest_assign(queries, effective, kind, chunk_size);
  NearestResult out;
  out.z_q = Tensor(queries.rows(), codebook.dim());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    auto code = effective.row(a.indices[i]);
    auto dst = out.z_q.row(i);
    if (kind == DistanceKind::euclidean) {
      std::copy(code.begin(), code.end(), dst.begin());
      continue;
    }
    unit_normalize(code, dst);
    if (kind == DistanceKind::cosine_renorm) {
      const double norm = std::sqrt(squared_norm(queries.row(i)));
      for (double& x : dst) x *= norm;
    }
  }
  out.indices = std::move(a.indices);
  out.distances = std::move(a.distances);
  return out;
}

std::size_t sample_code_stochastic(std::span<const double> query, const Tensor& effective_codes,
                                   DistanceKind kind, double tau, Rng& rng) {
  require(tau > 0.0, "sample_code_stochastic: temperature must be > 0");
  require(effective_codes.rows() >= 1, "sample_code_stochastic needs a nonempty codebook");
  require(query.size() == effective_codes.cols(), "sample_code_stochastic dimension mismatch");
  const std::size_t m = effective_codes.rows();
  std::vector<double> logits(m);
  for (std::size_t j = 0; j < m; ++j) logits[j] = -code_distance(query, effective_codes.row(j), kind) / tau;
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& l : logits) {
    l = std::exp(l - top);
    total += l;
  }
  const double target = uniform01(rng) * total;
  double running = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    running += logits[j];
    if (target < running) return j;
  }
  // Rounding can leave target == total; fall back to the last code with mass.
  for (std::size_t j = m; j-- > 0;)
    if (logits[j] > 0.0) return j;
  return 0;
}

std::size_t sample_code_stochastic(std::span<const double> query, const Codebook& codebook,
                                   DistanceKind kind, double tau, Rng& rng) {
  return sample_code_stochastic(query, codebook.effective_codes(), kind, tau, rng);
}

Tensor group_split(const Tensor& z, std::size_t n_group) {
  require(n_group >= 1 && z.cols() % n_group == 0,
          "group_split: n_group must divide the vector dimension");
  return z.reshaped(z.rows() * n_group, z.cols() / n_group);
}

Tensor group_concat(const Tensor& groups, std::size_t n_group) {
  require(n_group >= 1 && groups.rows() % n_group == 0,
          "group_concat: row count is not a multiple of n_group");
  Tensor out = groups.reshaped(groups.rows() / n_group, groups.cols() * n_group);
  if (n_group == 1) return out;
  const double factor = 1.0 / std::sqrt(static_cast<double>(n_group));
  for (double& x : out.values()) x *= factor;
  return out;
}

std::vector<std::uint8_t> encode_codebook_binary(const Codebook& codebook) {
  std::vector<std::uint8_t> out{'V', 'Q', 'K', 'B'};
  put_u32(out, kCodebookFormatVersion);
  put_u64(out, codebook.size());
  put_u64(out, codebook.dim());
  for (double v : codebook.codes().values()) put_f64(out, v);
  for (double v : codebook.affine_scale()) put_f64(out, v);
  for (double v : codebook.affine_bias()) put_f64(out, v);
  return out;
}

Codebook decode_codebook_binary(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 4 && bytes[0] == 'V' && bytes[1] == 'Q' && bytes[2] == 'K' && bytes[3] == 'B',
          "codebook binary: bad magic");
  ByteReader in(bytes.subspan(4));
  const auto version = static_cast<std::uint32_t>(in.take(4));
  require(version == kCodebookFormatVersion,
          "codebook binary: unsupported version " + std::to_string(version));
  const std::uint64_t m = in.take(8);
  const std::uint64_t d = in.take(8);
  require(m >= 1 && d >= 1, "codebook binary: empty shape");
  require((bytes.size() - 24) / 8 == m * d + 2 * d, "codebook binary: payload length mismatch");
  std::vector<double> codes(m * d);
  for (double& v : codes) v = in.take_f64();
  Codebook cb(Tensor(m, d, std::move(codes)));
  for (double& v : cb.affine_scale()) v = in.take_f64();
  for (double& v : cb.affine_bias()) v = in.take_f64();
  require(in.at_end(), "codebook binary: trailing bytes");
  return cb;
}

std::string encode_codebook_sidecar(const Codebook& codebook) {
  const auto& m = codebook.moments();
  nlohmann::json j;
  j["version"] = kCodebookFormatVersion;
  j["usage"] = {{"last_used", codebook.usage().last_used}, {"total", codebook.usage().total}};
  j["moments"] = {{"mean_e", m.mean_e}, {"var_e", m.var_e}, {"mean_q", m.mean_q}, {"var_q", m.var_q}};
  return j.dump(2) + "\n";
}

void apply_codebook_sidecar(Codebook& codebook, std::string_view json_text) {
  const auto j = nlohmann::json::parse(json_text);
  auto& usage = codebook.usage();
  auto& m = codebook.moments();
  usage.last_used = j.at("usage").at("last_used").get<std::vector<std::int64_t>>();
  usage.total = j.at("usage").at("total").get<std::vector<std::uint64_t>>();
  m.mean_e = j.at("moments").at("mean_e").get<std::vector<double>>();
  m.var_e = j.at("moments").at("var_e").get<std::vector<double>>();
  m.mean_q = j.at("moments").at("mean_q").get<std::vector<double>>();
  m.var_q = j.at("moments").at("var_q").get<std::vector<double>>();
  require(usage.last_used.size() == codebook.size() && usage.total.size() == codebook.size(),
          "codebook sidecar: usage length mismatch");
  for (const auto* v : {&m.mean_e, &m.var_e, &m.mean_q, &m.var_q})
    require(v->size() == codebook.dim(), "codebook sidecar: moment length mismatch");
}

void save_codebook(const Codebook& codebook, const std::filesystem::path& binary_path,
                   const std::filesystem::path& sidecar_path) {
  const auto bytes = encode_codebook_binary(codebook);
  std::ofstream bin(binary_path, std::ios::binary);
  require(static_cast<bool>(bin), "cannot open " + binary_path.string());
  bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  std::ofstream side(sidecar_path);
  require(static_cast<bool>(side), "cannot open " + sidecar_path.string());
  side << encode_codebook_sidecar(codebook);
}

Codebook load_codebook(const std::filesystem::path& binary_path,
                       const std::filesystem::path& sidecar_path) {
  std::ifstream bin(binary_path, std::ios::binary);
  require(static_cast<bool>(bin), "cannot open " + binary_path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(bin)),
                                        std::istreambuf_iterator<char>());
  Codebook cb = decode_codebook_binary(bytes);
  std::ifstream side(sidecar_path);
  require(static_cast<bool>(side), "cannot open " + sidecar_path.string());
  const std::string text((std::istreambuf_iterator<char>(side)), std::istreambuf_iterator<char>());
  apply_codebook_sidecar(cb, text);
  return cb;
}

}  // namespace vqkit
