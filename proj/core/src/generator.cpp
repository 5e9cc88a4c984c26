#include "facecom/generator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "facecom/errors.hpp"
#include "facecom/random.hpp"

namespace facecom {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

// ---- FeaSt convolution --------------------------------------------------

Neighborhoods Neighborhoods::with_self(const std::vector<std::vector<int>>& adjacency) {
  Neighborhoods nb;
  nb.offsets.reserve(adjacency.size() + 1);
  nb.offsets.push_back(0);
  for (std::size_t i = 0; i < adjacency.size(); ++i) {
    std::vector<int> row = adjacency[i];
    row.push_back(static_cast<int>(i));
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
    nb.indices.insert(nb.indices.end(), row.begin(), row.end());
    nb.offsets.push_back(static_cast<int>(nb.indices.size()));
  }
  return nb;
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix glorot(int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
  return m;
}

// Head-softmax of the attention logits for every (edge, head) of one mesh
// block; rows follow the CSR edge order. xu is row-major, heads wide.
// exp(u_j - u_i + c) factors into per-vertex terms, each shifted by its own
// maximum; edges whose product underflows are recomputed directly.
void attention_block(const double* xu, const Neighborhoods& nb, const double* c, int heads, double* q) {
  const int n = nb.vertex_count();
  std::vector<double> src(static_cast<std::size_t>(n) * static_cast<std::size_t>(heads));
  std::vector<double> dst(src.size());
  for (int v = 0; v < n; ++v) {
    const double* u = xu + static_cast<std::ptrdiff_t>(v) * heads;
    double* a = src.data() + static_cast<std::ptrdiff_t>(v) * heads;
    double* b = dst.data() + static_cast<std::ptrdiff_t>(v) * heads;
    double top_a = -std::numeric_limits<double>::infinity();
    double top_b = top_a;
    for (int m = 0; m < heads; ++m) {
      top_a = std::max(top_a, u[m]);
      top_b = std::max(top_b, c[m] - u[m]);
    }
    for (int m = 0; m < heads; ++m) {
      a[m] = std::exp(u[m] - top_a);
      b[m] = std::exp(c[m] - u[m] - top_b);
    }
  }
  for (int i = 0; i < n; ++i) {
    const double* bi = dst.data() + static_cast<std::ptrdiff_t>(i) * heads;
    for (int e = nb.offsets[static_cast<std::size_t>(i)]; e < nb.offsets[static_cast<std::size_t>(i) + 1]; ++e) {
      const int j = nb.indices[static_cast<std::size_t>(e)];
      const double* aj = src.data() + static_cast<std::ptrdiff_t>(j) * heads;
      double* row = q + static_cast<std::ptrdiff_t>(e) * heads;
      double total = 0.0;
      for (int m = 0; m < heads; ++m) {
        row[m] = aj[m] * bi[m];
        total += row[m];
      }
      if (total < 1e-200) {
        const double* ui = xu + static_cast<std::ptrdiff_t>(i) * heads;
        const double* uj = xu + static_cast<std::ptrdiff_t>(j) * heads;
        double top = -std::numeric_limits<double>::infinity();
        for (int m = 0; m < heads; ++m) {
          row[m] = uj[m] - ui[m] + c[m];
          top = std::max(top, row[m]);
        }
        total = 0.0;
        for (int m = 0; m < heads; ++m) {
          row[m] = std::exp(row[m] - top);
          total += row[m];
        }
      }
      const double inv = 1.0 / total;
      for (int m = 0; m < heads; ++m) row[m] *= inv;
    }
  }
}

}  // namespace

namespace {

void check_feast_shapes(Var x, const Neighborhoods& nb, int batch, Var weight, Var attention, Var attention_bias,
                        Var bias, int heads) {
  const Eigen::Index cin = x.cols();
  const Eigen::Index cout = bias.cols();
  if (x.rows() != static_cast<Eigen::Index>(nb.vertex_count()) * batch)
    throw NumericError("feast: features have " + std::to_string(x.rows()) + " rows, expected " +
                       std::to_string(nb.vertex_count()) + " x " + std::to_string(batch));
  if (weight.rows() != cin || weight.cols() != cout * heads || attention.rows() != cin ||
      attention.cols() != heads || attention_bias.rows() != 1 || attention_bias.cols() != heads || bias.rows() != 1)
    throw NumericError("feast: parameter shapes do not match " + std::to_string(cin) + " -> " +
                       std::to_string(cout) + " with " + std::to_string(heads) + " heads");
}

// Softmax backward for one edge: accumulates logit gradients into the
// attention projections of both endpoints and the attention bias.
inline void attention_backward(const double* qe, const double* gq, int heads, double* dui, double* duj,
                               double* gc) {
  double dot = 0.0;
  for (int m = 0; m < heads; ++m) dot += qe[m] * gq[m];
  for (int m = 0; m < heads; ++m) {
    const double gl = qe[m] * (gq[m] - dot);
    duj[m] += gl;
    dui[m] -= gl;
    gc[m] += gl;
  }
}

}  // namespace

// Two equivalent evaluation orders. When the input is narrower than the
// output, neighbours are mixed in input space (heads x in per edge) and the
// weights are applied afterwards as one product; otherwise the per-head
// transformed features of each neighbour are mixed directly.
Var feast_conv(Var x, const Neighborhoods& nb, int batch, Var weight, Var attention, Var attention_bias, Var bias,
               int heads) {
  check_feast_shapes(x, nb, batch, weight, attention, attention_bias, bias, heads);
  Tape& tape = *x.tape();
  const int n = nb.vertex_count();
  const Eigen::Index cin = x.cols();
  const Eigen::Index cout = bias.cols();
  const bool input_space = cin < cout;
  const std::size_t edges = nb.indices.size();
  const std::size_t block = edges * static_cast<std::size_t>(heads);

  struct Saved {
    RowMatrix values;  // x (input space) or x W (output space)
    RowMatrix mixed;   // input space only: per-vertex head mixtures, already divided by degree
    std::vector<double> q;
  };
  auto saved = std::make_shared<Saved>();
  const RowMatrix xu = x.value() * attention.value();
  saved->q.resize(block * static_cast<std::size_t>(batch));
  const Eigen::RowVectorXd c = attention_bias.value().row(0);
  for (int s = 0; s < batch; ++s)
    attention_block(xu.data() + static_cast<Eigen::Index>(s) * n * heads, nb, c.data(), heads,
                    saved->q.data() + static_cast<std::size_t>(s) * block);

  const Eigen::Index width = input_space ? cin : cout * heads;
  if (input_space)
    saved->values = x.value();
  else
    saved->values.noalias() = x.value() * weight.value();

  // Mixing target per vertex: heads x cin (input space) or cout (output space).
  const Eigen::Index mix = input_space ? heads * cin : cout;
  RowMatrix mixed = RowMatrix::Zero(x.rows(), mix);
  for (int s = 0; s < batch; ++s) {
    const Eigen::Index base = static_cast<Eigen::Index>(s) * n;
    const double* values = saved->values.data() + base * width;
    const double* q = saved->q.data() + static_cast<std::size_t>(s) * block;
    for (int i = 0; i < n; ++i) {
      const int begin = nb.offsets[static_cast<std::size_t>(i)];
      const int end = nb.offsets[static_cast<std::size_t>(i) + 1];
      const double inv = 1.0 / static_cast<double>(end - begin);
      double* __restrict acc = mixed.data() + (base + i) * mix;
      for (int e = begin; e < end; ++e) {
        const double* __restrict vj = values + static_cast<std::ptrdiff_t>(nb.indices[static_cast<std::size_t>(e)]) * width;
        const double* qe = q + static_cast<std::ptrdiff_t>(e) * heads;
        for (int m = 0; m < heads; ++m) {
          const double w = qe[m] * inv;
          if (input_space) {
            double* __restrict am = acc + m * cin;
            for (Eigen::Index k = 0; k < cin; ++k) am[k] += w * vj[k];
          } else {
            const double* __restrict vm = vj + m * cout;
            for (Eigen::Index k = 0; k < cout; ++k) acc[k] += w * vm[k];
          }
        }
      }
    }
  }

  Matrix out(x.rows(), cout);
  Matrix flat;  // heads*cin x cout, block m = W_m
  if (input_space) {
    flat.resize(heads * cin, cout);
    for (int m = 0; m < heads; ++m) flat.middleRows(m * cin, cin) = weight.value().middleCols(m * cout, cout);
    out.noalias() = mixed * flat;
    saved->mixed = std::move(mixed);
  } else {
    out = mixed;
  }
  out.rowwise() += bias.value().row(0);

  const Matrix* xv = &x.value();
  const Matrix* wv = &weight.value();
  const Matrix* uv = &attention.value();
  const Neighborhoods* nbp = &nb;
  return tape.record(
      {x, weight, attention, attention_bias, bias}, std::move(out),
      [saved, flat = std::move(flat), xv, wv, uv, nbp, batch, heads, cin, cout, width, mix, block,
       input_space](const Matrix& g, std::span<Matrix* const> gi) {
        const Neighborhoods& nb = *nbp;
        const int n = nb.vertex_count();
        // Gradient w.r.t. the mixed features.
        RowMatrix gmix;
        if (input_space)
          gmix.noalias() = g * flat.transpose();
        else
          gmix = g;
        RowMatrix gvalues = RowMatrix::Zero(saved->values.rows(), width);
        RowMatrix gxu = RowMatrix::Zero(xv->rows(), heads);
        Eigen::RowVectorXd gc = Eigen::RowVectorXd::Zero(heads);
        std::vector<double> gq(static_cast<std::size_t>(heads));
        for (int s = 0; s < batch; ++s) {
          const Eigen::Index base = static_cast<Eigen::Index>(s) * n;
          const double* values = saved->values.data() + base * width;
          double* dvalues = gvalues.data() + base * width;
          double* dxu = gxu.data() + base * heads;
          const double* q = saved->q.data() + static_cast<std::size_t>(s) * block;
          for (int i = 0; i < n; ++i) {
            const int begin = nb.offsets[static_cast<std::size_t>(i)];
            const int end = nb.offsets[static_cast<std::size_t>(i) + 1];
            const double inv = 1.0 / static_cast<double>(end - begin);
            const double* __restrict gm = gmix.data() + (base + i) * mix;
            for (int e = begin; e < end; ++e) {
              const int j = nb.indices[static_cast<std::size_t>(e)];
              const double* __restrict vj = values + static_cast<std::ptrdiff_t>(j) * width;
              double* __restrict dvj = dvalues + static_cast<std::ptrdiff_t>(j) * width;
              const double* qe = q + static_cast<std::ptrdiff_t>(e) * heads;
              for (int m = 0; m < heads; ++m) {
                const double w = qe[m] * inv;
                double d = 0.0;
                if (input_space) {
                  const double* __restrict gmm = gm + m * cin;
                  for (Eigen::Index k = 0; k < cin; ++k) {
                    d += gmm[k] * vj[k];
                    dvj[k] += w * gmm[k];
                  }
                } else {
                  const double* __restrict vm = vj + m * cout;
                  double* __restrict dvm = dvj + m * cout;
                  for (Eigen::Index k = 0; k < cout; ++k) {
                    d += gm[k] * vm[k];
                    dvm[k] += w * gm[k];
                  }
                }
                gq[static_cast<std::size_t>(m)] = d * inv;
              }
              attention_backward(qe, gq.data(), heads, dxu + static_cast<std::ptrdiff_t>(i) * heads,
                                 dxu + static_cast<std::ptrdiff_t>(j) * heads, gc.data());
            }
          }
        }
        if (input_space) {
          if (gi[0]) *gi[0] += gvalues;
          if (gi[1]) {
            const Matrix gflat = saved->mixed.transpose() * g;
            for (int m = 0; m < heads; ++m) gi[1]->middleCols(m * cout, cout) += gflat.middleRows(m * cin, cin);
          }
        } else {
          if (gi[0]) gi[0]->noalias() += gvalues * wv->transpose();
          if (gi[1]) gi[1]->noalias() += xv->transpose() * gvalues;
        }
        if (gi[0]) gi[0]->noalias() += gxu * uv->transpose();
        if (gi[2]) gi[2]->noalias() += xv->transpose() * gxu;
        if (gi[3]) gi[3]->row(0) += gc;
        if (gi[4]) gi[4]->row(0) += g.colwise().sum();
      });
}

FeastLayer FeastLayer::make(const std::string& name, int in, int out, int heads, Rng& rng) {
  FeastLayer l;
  l.in_channels = in;
  l.out_channels = out;
  l.heads = heads;
  Matrix w(in, out * heads);
  for (int m = 0; m < heads; ++m) w.middleCols(m * out, out) = glorot(in, out, rng);
  l.weight = Parameter(name + "/weight", std::move(w));
  l.attention = Parameter(name + "/attention", glorot(in, heads, rng));
  l.attention_bias = Parameter(name + "/attention_bias", Matrix::Zero(1, heads));
  l.bias = Parameter(name + "/bias", Matrix::Zero(1, out));
  return l;
}

FeastLayer FeastLayer::zeros(const std::string& name, int in, int out, int heads) {
  FeastLayer l;
  l.in_channels = in;
  l.out_channels = out;
  l.heads = heads;
  l.weight = Parameter(name + "/weight", Matrix::Zero(in, out * heads));
  l.attention = Parameter(name + "/attention", Matrix::Zero(in, heads));
  l.attention_bias = Parameter(name + "/attention_bias", Matrix::Zero(1, heads));
  l.bias = Parameter(name + "/bias", Matrix::Zero(1, out));
  return l;
}

std::vector<Parameter*> FeastLayer::parameters() { return {&weight, &attention, &attention_bias, &bias}; }

Var feast_forward(Tape& tape, Var x, const Neighborhoods& nb, FeastLayer& layer, int batch, bool trainable) {
  return feast_conv(x, nb, batch, tape.param(layer.weight, trainable), tape.param(layer.attention, trainable),
                    tape.param(layer.attention_bias, trainable), tape.param(layer.bias, trainable), layer.heads);
}

Matrix feast_attention(const Matrix& x, const Neighborhoods& nb, const FeastLayer& layer) {
  const RowMatrix xu = x * layer.attention.value;
  const Eigen::RowVectorXd c = layer.attention_bias.value.row(0);
  RowMatrix q(nb.edge_count(), layer.heads);
  attention_block(xu.data(), nb, c.data(), layer.heads, q.data());
  return q;
}

DenseLayer DenseLayer::make(const std::string& name, int in, int out, Rng& rng) {
  DenseLayer d;
  d.weight = Parameter(name + "/weight", glorot(in, out, rng));
  d.bias = Parameter(name + "/bias", Matrix::Zero(1, out));
  return d;
}

std::vector<Parameter*> DenseLayer::parameters() { return {&weight, &bias}; }

namespace {

Var dense(Tape& tape, Var x, DenseLayer& d, bool trainable) {
  return ad::add_row(ad::matmul(x, tape.param(d.weight, trainable)), tape.param(d.bias, trainable));
}

}  // namespace

Var reg_loss(Var z) {
  Tape& tape = *z.tape();
  const Eigen::Index rows = z.rows();
  Eigen::VectorXd norms(rows);
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    norms(r) = std::sqrt(z.value().row(r).squaredNorm() + 1e-12);
    total += (norms(r) - 1.0) * (norms(r) - 1.0);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(rows);
  const Matrix* zv = &z.value();
  return tape.record({z}, std::move(out), [zv, norms, rows](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (Eigen::Index r = 0; r < rows; ++r)
      gi[0]->row(r) += g(0, 0) * 2.0 * (norms(r) - 1.0) / norms(r) / static_cast<double>(rows) * zv->row(r);
  });
}

// ---- configuration ---------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full:
      return "full";
    case Variant::GlobalOnly:
      return "global-only";
    case Variant::LocalOnly:
      return "local-only";
  }
  return "full";
}

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::Full;
  if (name == "global-only") return Variant::GlobalOnly;
  if (name == "local-only") return Variant::LocalOnly;
  throw UsageError("unknown variant '" + name + "' (expected full, global-only or local-only)");
}

namespace {

int scaled(int channels, double factor) { return std::max(1, static_cast<int>(std::lround(channels * factor))); }

std::size_t feast_size(int in, int out, int heads) {
  return static_cast<std::size_t>(in) * heads * out + static_cast<std::size_t>(in) * heads + heads + out;
}

std::size_t dense_size(std::size_t in, std::size_t out) { return in * out + out; }

void validate(const SamplingHierarchy& h, const GeneratorConfig& cfg) {
  if (h.levels.empty()) throw UsageError("generator needs a sampling hierarchy");
  if (cfg.variant != Variant::LocalOnly && cfg.global_channels.size() != h.levels.size())
    throw UsageError("global_channels needs one entry per hierarchy level (" + std::to_string(h.levels.size()) + ")");
  if (cfg.variant != Variant::GlobalOnly && cfg.local_channels.empty())
    throw UsageError("local_channels must not be empty");
  if (cfg.heads < 1 || cfg.latent < 1 || cfg.global_latent < 1 || cfg.local_latent < 1 || !(cfg.width_scale > 0.0))
    throw UsageError("generator sizes must be positive");
}

}  // namespace

std::size_t count_parameters(const SamplingHierarchy& h, const GeneratorConfig& cfg) {
  validate(h, cfg);
  const bool global = cfg.variant != Variant::LocalOnly;
  const bool local = cfg.variant != Variant::GlobalOnly;
  const int heads = cfg.heads;
  std::size_t total = 0;
  std::size_t fused = 0;
  int head_in = 0;
  if (global) {
    const std::size_t levels = h.levels.size();
    std::vector<int> c;
    for (int ch : cfg.global_channels) c.push_back(scaled(ch, cfg.width_scale));
    int in = 3;
    for (int ch : c) {
      total += feast_size(in, ch, heads);
      in = ch;
    }
    const std::size_t flat = h.levels.back().mesh.vertices.size() * static_cast<std::size_t>(c.back());
    total += dense_size(flat, static_cast<std::size_t>(cfg.global_latent));  // encoder
    total += dense_size(static_cast<std::size_t>(cfg.global_latent), flat);  // decoder
    for (std::size_t l = levels - 1; l >= 1; --l) total += feast_size(c[l], c[l - 1], heads);
    total += feast_size(c[0], c[0], heads);
    fused += static_cast<std::size_t>(cfg.global_latent);
    head_in += c[0];
  }
  if (local) {
    std::vector<int> c;
    for (int ch : cfg.local_channels) c.push_back(scaled(ch, cfg.width_scale));
    int in = 3;
    for (int ch : c) {
      total += feast_size(in, ch, heads);
      in = ch;
    }
    const std::size_t flat = h.levels.front().mesh.vertices.size() * static_cast<std::size_t>(c.back());
    total += dense_size(flat, static_cast<std::size_t>(cfg.local_latent));
    total += dense_size(static_cast<std::size_t>(cfg.local_latent), flat);
    for (std::size_t k = c.size() - 1; k >= 1; --k) total += feast_size(c[k], c[k - 1], heads);
    total += feast_size(c[0], c[0], heads);
    fused += static_cast<std::size_t>(cfg.local_latent);
    head_in += c[0];
  }
  total += dense_size(fused, static_cast<std::size_t>(cfg.latent));
  total += dense_size(static_cast<std::size_t>(cfg.latent), fused);
  total += feast_size(head_in, 3, heads);
  total += h.levels.front().mesh.vertices.size() * 3;  // output offset
  return total;
}

GeneratorConfig match_variant(const SamplingHierarchy& h, const GeneratorConfig& base, Variant variant) {
  GeneratorConfig full = base;
  full.variant = Variant::Full;
  full.width_scale = base.width_scale;
  if (variant == Variant::Full) return full;
  const double target = static_cast<double>(count_parameters(h, full));
  GeneratorConfig best = full;
  best.variant = variant;
  double best_gap = std::numeric_limits<double>::infinity();
  for (double f = 0.1; f <= 40.0; f *= 1.005) {
    GeneratorConfig c = full;
    c.variant = variant;
    c.width_scale = full.width_scale * f;
    const double gap = std::abs(static_cast<double>(count_parameters(h, c)) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = c;
    }
  }
  return best;
}

// ---- model -------------------------------------------------------------------

GeneratorModel::GeneratorModel(SamplingHierarchy hierarchy, GeneratorConfig cfg)
    : hierarchy_(std::move(hierarchy)), cfg_(std::move(cfg)) {
  validate(hierarchy_, cfg_);
  for (const MeshLevel& level : hierarchy_.levels) neighborhoods_.push_back(Neighborhoods::with_self(level.adjacency));
  Rng rng = Rng::stream(cfg_.seed, "init");
  const int heads = cfg_.heads;
  int fused = 0;
  int head_in = 0;
  if (has_global_path()) {
    std::vector<int> c;
    for (int ch : cfg_.global_channels) c.push_back(scaled(ch, cfg_.width_scale));
    int in = 3;
    for (std::size_t l = 0; l < c.size(); ++l) {
      enc_global_.push_back(FeastLayer::make("enc/global/conv" + std::to_string(l), in, c[l], heads, rng));
      in = c[l];
    }
    const int flat = static_cast<int>(hierarchy_.levels.back().mesh.vertices.size()) * c.back();
    enc_global_dense_ = DenseLayer::make("enc/global/dense", flat, cfg_.global_latent, rng);
    dec_global_dense_ = DenseLayer::make("dec/global/dense", cfg_.global_latent, flat, rng);
    for (std::size_t l = c.size() - 1; l >= 1; --l)
      dec_global_.push_back(FeastLayer::make("dec/global/conv" + std::to_string(l), c[l], c[l - 1], heads, rng));
    dec_global_.push_back(FeastLayer::make("dec/global/conv0", c[0], c[0], heads, rng));
    fused += cfg_.global_latent;
    head_in += c[0];
  }
  if (has_local_path()) {
    std::vector<int> c;
    for (int ch : cfg_.local_channels) c.push_back(scaled(ch, cfg_.width_scale));
    int in = 3;
    for (std::size_t k = 0; k < c.size(); ++k) {
      enc_local_.push_back(FeastLayer::make("enc/local/conv" + std::to_string(k), in, c[k], heads, rng));
      in = c[k];
    }
    const int flat = vertex_count() * c.back();
    enc_local_dense_ = DenseLayer::make("enc/local/dense", flat, cfg_.local_latent, rng);
    dec_local_dense_ = DenseLayer::make("dec/local/dense", cfg_.local_latent, flat, rng);
    for (std::size_t k = c.size() - 1; k >= 1; --k)
      dec_local_.push_back(FeastLayer::make("dec/local/conv" + std::to_string(k), c[k], c[k - 1], heads, rng));
    dec_local_.push_back(FeastLayer::make("dec/local/conv0", c[0], c[0], heads, rng));
    fused += cfg_.local_latent;
    head_in += c[0];
  }
  fuse_ = DenseLayer::make("enc/fuse", fused, cfg_.latent, rng);
  split_ = DenseLayer::make("dec/split", cfg_.latent, fused, rng);
  head_ = FeastLayer::zeros("dec/head", head_in, 3, heads);

  mean_.resize(vertex_count(), 3);
  for (int i = 0; i < vertex_count(); ++i) mean_.row(i) = template_mesh().vertices[static_cast<std::size_t>(i)].transpose();
  offset_ = Parameter("dec/offset", mean_);
  latent_mean_ = Eigen::VectorXd::Zero(cfg_.latent);
  latent_mean_(0) = 1.0;
}

void GeneratorModel::set_normalization(const Matrix& mean, double scale) {
  if (mean.rows() != vertex_count() || mean.cols() != 3) throw DataError("normalization mean has the wrong shape");
  if (!(scale > 0.0)) throw NumericError("normalization scale must be positive");
  mean_ = mean;
  scale_ = scale;
  offset_.value = mean;
  offset_.zero_grad();
}

Var GeneratorModel::stacked(Tape& tape, const Matrix& m, int batch) {
  if (batch == 1) return tape.reference(m);
  Matrix out(m.rows() * batch, m.cols());
  for (int b = 0; b < batch; ++b) out.middleRows(b * m.rows(), m.rows()) = m;
  return tape.constant(std::move(out));
}

Var GeneratorModel::stacked(Tape&, Var v, int batch) {
  if (batch == 1) return v;
  const std::vector<Var> parts(static_cast<std::size_t>(batch), v);
  return ad::concat_rows(parts);
}

Var GeneratorModel::encode(Tape& tape, Var x, int batch, bool trainable) {
  if (x.rows() != static_cast<Eigen::Index>(vertex_count()) * batch || x.cols() != 3)
    throw DataError("encode: expected " + std::to_string(batch) + " meshes of " + std::to_string(vertex_count()) +
                    " vertices");
  const Var xn = ad::scale(ad::sub(x, stacked(tape, mean_, batch)), 1.0 / scale_);
  std::vector<Var> codes;
  if (has_global_path()) {
    Var h = xn;
    for (std::size_t l = 0; l < enc_global_.size(); ++l) {
      h = ad::elu(feast_forward(tape, h, neighborhoods_[l], enc_global_[l], batch, trainable));
      if (l + 1 < enc_global_.size()) h = ad::spmm_batched(*hierarchy_.levels[l].down, h, batch);
    }
    h = ad::reshape(h, batch, h.rows() / batch * h.cols());
    codes.push_back(ad::elu(dense(tape, h, enc_global_dense_, trainable)));
  }
  if (has_local_path()) {
    Var h = xn;
    for (FeastLayer& layer : enc_local_) h = ad::elu(feast_forward(tape, h, neighborhoods_[0], layer, batch, trainable));
    h = ad::reshape(h, batch, h.rows() / batch * h.cols());
    codes.push_back(ad::elu(dense(tape, h, enc_local_dense_, trainable)));
  }
  const Var joined = codes.size() == 1 ? codes[0] : ad::concat_cols(codes);
  return dense(tape, joined, fuse_, trainable);
}

Var GeneratorModel::decode(Tape& tape, Var z, bool trainable) {
  if (z.cols() != cfg_.latent) throw DataError("decode: latent length " + std::to_string(z.cols()) + ", expected " +
                                               std::to_string(cfg_.latent));
  const int batch = static_cast<int>(z.rows());
  const Var s = ad::elu(dense(tape, z, split_, trainable));
  std::vector<Var> features;
  Eigen::Index col = 0;
  if (has_global_path()) {
    const Var g = ad::slice_cols(s, col, cfg_.global_latent);
    col += cfg_.global_latent;
    Var h = ad::elu(dense(tape, g, dec_global_dense_, trainable));
    const int coarse = static_cast<int>(hierarchy_.levels.size()) - 1;
    const Eigen::Index n = static_cast<Eigen::Index>(hierarchy_.levels.back().mesh.vertices.size());
    h = ad::reshape(h, n * batch, h.cols() / n);
    for (int k = 0; k <= coarse; ++k) {
      const int level = coarse - k;
      h = ad::elu(feast_forward(tape, h, neighborhoods_[static_cast<std::size_t>(level)], dec_global_[static_cast<std::size_t>(k)],
                                batch, trainable));
      if (level > 0) h = ad::spmm_batched(*hierarchy_.levels[static_cast<std::size_t>(level) - 1].up, h, batch);
    }
    features.push_back(h);
  }
  if (has_local_path()) {
    const Var l = ad::slice_cols(s, col, cfg_.local_latent);
    Var h = ad::elu(dense(tape, l, dec_local_dense_, trainable));
    h = ad::reshape(h, static_cast<Eigen::Index>(vertex_count()) * batch, h.cols() / vertex_count());
    for (FeastLayer& layer : dec_local_) h = ad::elu(feast_forward(tape, h, neighborhoods_[0], layer, batch, trainable));
    features.push_back(h);
  }
  const Var joined = features.size() == 1 ? features[0] : ad::concat_cols(features);
  const Var out = feast_forward(tape, joined, neighborhoods_[0], head_, batch, trainable);
  return ad::add(ad::scale(out, scale_), stacked(tape, tape.param(offset_, trainable), batch));
}

Eigen::VectorXd GeneratorModel::encode_mesh(const TriMesh& mesh) {
  if (static_cast<int>(mesh.vertices.size()) != vertex_count())
    throw DataError("encode: mesh has " + std::to_string(mesh.vertices.size()) + " vertices, template has " +
                    std::to_string(vertex_count()));
  Tape tape;
  const Var z = encode(tape, tape.constant(stack_vertices({&mesh})), 1, false);
  return z.value().row(0).transpose();
}

TriMesh GeneratorModel::decode_mesh(const Eigen::VectorXd& z) {
  if (z.size() != cfg_.latent) throw DataError("decode: latent length mismatch");
  Tape tape;
  const Var out = decode(tape, tape.constant(Matrix(z.transpose())), false);
  return mesh_from_rows(out.value(), 0, template_mesh());
}

std::vector<Parameter*> GeneratorModel::parameters() {
  std::vector<Parameter*> out;
  auto add = [&](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  for (auto& l : enc_global_) add(l.parameters());
  if (has_global_path()) add(enc_global_dense_.parameters());
  for (auto& l : enc_local_) add(l.parameters());
  if (has_local_path()) add(enc_local_dense_.parameters());
  add(fuse_.parameters());
  add(split_.parameters());
  if (has_global_path()) add(dec_global_dense_.parameters());
  for (auto& l : dec_global_) add(l.parameters());
  if (has_local_path()) add(dec_local_dense_.parameters());
  for (auto& l : dec_local_) add(l.parameters());
  add(head_.parameters());
  out.push_back(&offset_);
  return out;
}

std::size_t GeneratorModel::parameter_count() const {
  std::size_t n = 0;
  for (Parameter* p : const_cast<GeneratorModel*>(this)->parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

int GeneratorModel::down_applications() const {
  return has_global_path() ? static_cast<int>(hierarchy_.levels.size()) - 1 : 0;
}

namespace {

constexpr const char* kModelFormat = "facecom-generator";
constexpr int kModelFormatVersion = 1;

}  // namespace

void GeneratorModel::save(const std::filesystem::path& path, const std::string& extra_json) const {
  nlohmann::json meta;
  meta["format"] = kModelFormat;
  meta["format_version"] = kModelFormatVersion;
  meta["variant"] = to_string(cfg_.variant);
  meta["global_channels"] = cfg_.global_channels;
  meta["local_channels"] = cfg_.local_channels;
  meta["heads"] = cfg_.heads;
  meta["global_latent"] = cfg_.global_latent;
  meta["local_latent"] = cfg_.local_latent;
  meta["latent"] = cfg_.latent;
  meta["width_scale"] = cfg_.width_scale;
  meta["seed"] = cfg_.seed;
  meta["scale"] = scale_;
  meta["parameter_count"] = parameter_count();
  meta["extra"] = nlohmann::json::parse(extra_json);
  ad::Pack pack;
  pack.metadata_json = meta.dump();
  for (Parameter* p : const_cast<GeneratorModel*>(this)->parameters())
    pack.arrays.push_back(ad::PackArray::from_matrix(p->name, p->value));
  pack.arrays.push_back(ad::PackArray::from_matrix("norm/mean", mean_));
  pack.arrays.push_back(ad::PackArray::from_matrix("latent_mean", Matrix(latent_mean_.transpose())));
  append_hierarchy(pack, hierarchy_, "hierarchy/");
  ad::write_pack(path, pack);
}

GeneratorModel GeneratorModel::load(const std::filesystem::path& path) {
  const ad::Pack pack = ad::read_pack(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(pack.metadata_json);
  } catch (const std::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string());
  }
  if (meta.value("format", "") != kModelFormat) throw DataError("not a generator checkpoint: " + path.string());
  if (meta.value("format_version", 0) != kModelFormatVersion)
    throw DataError("unsupported checkpoint version in " + path.string());
  GeneratorConfig cfg;
  cfg.variant = parse_variant(meta.at("variant").get<std::string>());
  cfg.global_channels = meta.at("global_channels").get<std::vector<int>>();
  cfg.local_channels = meta.at("local_channels").get<std::vector<int>>();
  cfg.heads = meta.at("heads").get<int>();
  cfg.global_latent = meta.at("global_latent").get<int>();
  cfg.local_latent = meta.at("local_latent").get<int>();
  cfg.latent = meta.at("latent").get<int>();
  cfg.width_scale = meta.at("width_scale").get<double>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  GeneratorModel model(read_hierarchy(pack, "hierarchy/"), cfg);
  for (Parameter* p : model.parameters()) {
    if (!pack.contains(p->name)) throw DataError("checkpoint lacks parameter " + p->name);
    const Matrix v = pack.at(p->name).to_matrix();
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw DataError("checkpoint parameter " + p->name + " has the wrong shape");
    p->value = v;
    p->zero_grad();
  }
  model.mean_ = pack.at("norm/mean").to_matrix();
  model.scale_ = meta.at("scale").get<double>();
  model.latent_mean_ = pack.at("latent_mean").to_matrix().row(0).transpose();
  return model;
}

// ---- training -------------------------------------------------------------

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_halving_epochs <= 0) return cfg.lr;
  return cfg.lr * std::pow(0.5, epoch / cfg.lr_halving_epochs);
}

Matrix stack_vertices(const std::vector<const TriMesh*>& meshes) {
  if (meshes.empty()) return Matrix(0, 3);
  const Eigen::Index n = static_cast<Eigen::Index>(meshes.front()->vertices.size());
  Matrix out(n * static_cast<Eigen::Index>(meshes.size()), 3);
  for (std::size_t b = 0; b < meshes.size(); ++b) {
    if (static_cast<Eigen::Index>(meshes[b]->vertices.size()) != n) throw DataError("stacked meshes differ in size");
    for (Eigen::Index i = 0; i < n; ++i)
      out.row(static_cast<Eigen::Index>(b) * n + i) = meshes[b]->vertices[static_cast<std::size_t>(i)].transpose();
  }
  return out;
}

TriMesh mesh_from_rows(const Matrix& rows, Eigen::Index first_row, const TriMesh& topology) {
  TriMesh m;
  m.faces = topology.faces;
  m.vertices.resize(topology.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    m.vertices[i] = rows.row(first_row + static_cast<Eigen::Index>(i)).transpose();
  return m;
}

std::vector<EpochStats> train(GeneratorModel& model, const std::vector<TriMesh>& data, const TrainConfig& cfg,
                              const std::function<void(const EpochStats&)>& on_epoch) {
  if (data.empty()) throw DataError("train: empty dataset");
  if (cfg.precision != "float64") throw UsageError("train: only float64 precision is supported");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0) || cfg.lambda < 0.0)
    throw UsageError("train: epochs, batch size and lr must be positive and lambda non-negative");
  const TriMesh& topo = model.template_mesh();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].vertices.size() != topo.vertices.size() || (!data[i].faces.empty() && data[i].faces != topo.faces))
      throw DataError("train: mesh " + std::to_string(i) + " does not share the template topology");
  }

  const Eigen::Index n = model.vertex_count();
  Matrix mean = Matrix::Zero(n, 3);
  for (const TriMesh& m : data)
    for (Eigen::Index i = 0; i < n; ++i) mean.row(i) += m.vertices[static_cast<std::size_t>(i)].transpose();
  mean /= static_cast<double>(data.size());
  double var = 0.0;
  for (const TriMesh& m : data)
    for (Eigen::Index i = 0; i < n; ++i) var += (m.vertices[static_cast<std::size_t>(i)].transpose() - mean.row(i)).squaredNorm();
  var /= static_cast<double>(data.size() * static_cast<std::size_t>(n) * 3);
  // A single mesh (or identical meshes) has no spread; fall back to unit scale.
  model.set_normalization(mean, var > 1e-24 ? std::sqrt(var) : 1.0);
  const double inv_s2 = 1.0 / (model.normalization_scale() * model.normalization_scale());

  const std::vector<Parameter*> params = model.parameters();
  ad::AdamState state;
  std::vector<EpochStats> log;
  std::vector<int> order(data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng = Rng::stream(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    const double lr = learning_rate(cfg, epoch);
    double sum_mse = 0.0;
    double sum_reg = 0.0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const TriMesh*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&data[static_cast<std::size_t>(order[k])]);
      const int b = static_cast<int>(batch.size());
      Tape tape;
      const Var x = tape.constant(stack_vertices(batch));
      const Var z = model.encode(tape, x, b, true);
      const Var out = model.decode(tape, z, true);
      const Var l_mse = ad::scale(ad::mse(out, x), inv_s2);
      const Var l_reg = reg_loss(z);
      const Var loss = ad::add(l_mse, ad::scale(l_reg, cfg.lambda));
      if (!std::isfinite(loss.scalar()))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      for (Parameter* p : params) p->zero_grad();
      tape.backward(loss);
      ad::adam_step(params, state, lr);
      sum_mse += l_mse.scalar() * b;
      sum_reg += l_reg.scalar() * b;
    }
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.l_mse = sum_mse / static_cast<double>(data.size());
    st.l_reg = sum_reg / static_cast<double>(data.size());
    log.push_back(st);
    if (on_epoch) on_epoch(st);
  }

  Eigen::VectorXd zsum = Eigen::VectorXd::Zero(model.latent_dim());
  const std::size_t count = std::min<std::size_t>(16, data.size());
  for (std::size_t i = 0; i < count; ++i) zsum += model.encode_mesh(data[i]);
  if (zsum.norm() > 1e-12) model.set_latent_mean(zsum.normalized());
  return log;
}

void write_train_log(const std::filesystem::path& path, const std::vector<EpochStats>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,lr,l_mse,l_reg\n";
  out.precision(10);
  for (const EpochStats& s : log) out << s.epoch << ',' << s.lr << ',' << s.l_mse << ',' << s.l_reg << '\n';
}

double reconstruction_error(GeneratorModel& model, const std::vector<TriMesh>& data) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const TriMesh& m : data) {
    const TriMesh r = model.decode_mesh(model.encode_mesh(m));
    double e = 0.0;
    for (std::size_t i = 0; i < m.vertices.size(); ++i) e += (r.vertices[i] - m.vertices[i]).norm();
    total += e / static_cast<double>(m.vertices.size());
  }
  return total / static_cast<double>(data.size());
}

Eigen::VectorXd sample_latent(int dim, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "sample");
  Eigen::VectorXd z(dim);
  do {
    for (int i = 0; i < dim; ++i) z(i) = rng.normal();
  } while (z.norm() == 0.0);
  return z / z.norm();
}

TriMesh sample(GeneratorModel& model, std::uint64_t seed) {
  return model.decode_mesh(sample_latent(model.latent_dim(), seed));
}

}  // namespace facecom
