#include "niab/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "niab/error.hpp"
#include "niab/util.hpp"
#include "rowgemm.hpp"

namespace niab {

namespace {

constexpr double kLnEps = 1e-5;

Mat mm(detail::ConstRowRef x, detail::ConstRowRef w) {
  Mat y(x.rows(), w.cols());
  if (y.size() > 0) detail::gemm_rows(x, w, y.data());
  return y;
}

Mat affine(const Mat& x, const Affine& a) {
  Mat y = mm(x, a.w);
  y.rowwise() += a.b.row(0);
  return y;
}

void affine_grad(const Mat& x, const Mat& dy, Affine& g) {
  g.w.noalias() += x.transpose() * dy;
  g.b += dy.colwise().sum();
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)) +
         x * std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
}

Mat gelu(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

// Sequential sum. Eigen's vectorized reductions and packet exp pick their
// code path by the row's alignment, so results would depend on row position.
double row_sum(const double* p, Eigen::Index n) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s += p[i];
  return s;
}

// Row-wise softmax in place.
void softmax_rows(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double* r = m.row(i).data();
    const double mx = m.row(i).maxCoeff();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[j] = std::exp(r[j] - mx);
    const double z = row_sum(r, m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[j] /= z;
  }
}

// dS from dP for P = softmax(S) row-wise.
Mat softmax_back(const Mat& p, const Mat& dp) {
  Mat ds = p.cwiseProduct(dp);
  const Eigen::VectorXd dot = ds.rowwise().sum();
  ds -= p.cwiseProduct(dot.replicate(1, p.cols()));
  return ds;
}

struct NormCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

Mat layer_norm(const Mat& y, const Norm& n, NormCache& c) {
  c.xhat.resize(y.rows(), y.cols());
  c.rstd.resize(y.rows());
  const double d = static_cast<double>(y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double* row = y.row(i).data();
    const double mu = row_sum(row, y.cols()) / d;
    double var = 0.0;
    for (Eigen::Index j = 0; j < y.cols(); ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    c.rstd[i] = 1.0 / std::sqrt(var + kLnEps);
    c.xhat.row(i) = (y.row(i).array() - mu) * c.rstd[i];
  }
  Mat out = c.xhat.array().rowwise() * n.g.row(0).array();
  out.rowwise() += n.b.row(0);
  return out;
}

Mat layer_norm_back(const Mat& dout, const Norm& n, const NormCache& c, Norm& g) {
  g.g += dout.cwiseProduct(c.xhat).colwise().sum();
  g.b += dout.colwise().sum();
  const Mat dxhat = dout.array().rowwise() * n.g.row(0).array();
  const double d = static_cast<double>(dout.cols());
  Mat dy(dout.rows(), dout.cols());
  for (Eigen::Index i = 0; i < dout.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dy.row(i) = c.rstd[i] * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dy;
}

Mat uniform_mat(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Affine make_affine(Rng* rng, std::size_t in, std::size_t out) {
  const auto r = static_cast<Eigen::Index>(in), c = static_cast<Eigen::Index>(out);
  Affine a;
  a.w = rng ? uniform_mat(*rng, r, c, std::sqrt(3.0 / static_cast<double>(in))) : Mat::Zero(r, c);
  a.b = Mat::Zero(1, c);
  return a;
}

Norm make_norm(bool ones, std::size_t d) {
  const auto n = static_cast<Eigen::Index>(d);
  return {ones ? Mat::Ones(1, n) : Mat::Zero(1, n), Mat::Zero(1, n)};
}

RankerParams build(const RankerConfig& cfg, Rng* rng) {
  cfg.validate();
  const std::size_t dm = cfg.d_model;
  RankerParams p;
  p.proj_h = make_affine(rng, cfg.input_dim, dm);
  p.proj_a = make_affine(rng, cfg.input_dim, dm);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer e;
    e.q = make_affine(rng, dm, dm);
    e.k = make_affine(rng, dm, dm);
    e.v = make_affine(rng, dm, dm);
    e.o = make_affine(rng, dm, dm);
    e.ln1 = make_norm(rng != nullptr, dm);
    e.ff1 = make_affine(rng, dm, cfg.ff_hidden());
    e.ff2 = make_affine(rng, cfg.ff_hidden(), dm);
    e.ln2 = make_norm(rng != nullptr, dm);
    p.layers.push_back(std::move(e));
  }
  p.cross_q = make_affine(rng, dm, dm);
  p.cross_k = make_affine(rng, dm, dm);
  p.cross_v = make_affine(rng, dm, dm);
  p.cross_o = make_affine(rng, dm, dm);
  p.fc1 = make_affine(rng, 2 * dm, cfg.mlp_hidden);
  p.fc2 = make_affine(rng, cfg.mlp_hidden, 1);
  return p;
}

}  // namespace

void RankerConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
  if (input_dim == 0 || d_model == 0 || n_heads == 0 || mlp_hidden == 0) bad("ranker dims must be positive");
  if (d_model % 2 != 0) fail(ErrorCode::OddDim, "d_model must be even, got " + std::to_string(d_model));
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (max_steps == 0 || max_candidates == 0) bad("max_steps and max_candidates must be positive");
}

RankerParams RankerParams::init(const RankerConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  return build(config, &rng);
}

RankerParams RankerParams::zeros(const RankerConfig& config) { return build(config, nullptr); }

std::size_t RankerParams::num_values() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

Mat positional_encoding(const std::vector<std::size_t>& positions, std::size_t d_model) {
  if (d_model % 2 != 0) fail(ErrorCode::OddDim, "positional encoding needs an even width");
  Mat pe(static_cast<Eigen::Index>(positions.size()), static_cast<Eigen::Index>(d_model));
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = static_cast<double>(positions[r]) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(2 * i)) = std::sin(angle);
      pe(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(2 * i + 1)) = std::cos(angle);
    }
  }
  return pe;
}

Mat positional_encoding(std::size_t steps, std::size_t d_model) {
  std::vector<std::size_t> pos(steps);
  for (std::size_t i = 0; i < steps; ++i) pos[i] = i;
  return positional_encoding(pos, d_model);
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<bool>& key_mask, Mat* weights) {
  if (k.rows() != v.rows() || q.cols() != k.cols() || key_mask.size() != static_cast<std::size_t>(k.rows())) {
    fail(ErrorCode::ShapeMismatch, "attention operands disagree in shape");
  }
  if (std::none_of(key_mask.begin(), key_mask.end(), [](bool b) { return b; })) {
    fail(ErrorCode::AllKeysMasked, "every key is masked");
  }
  Mat s = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    if (!key_mask[static_cast<std::size_t>(j)]) s.col(j).setConstant(-std::numeric_limits<double>::infinity());
  }
  softmax_rows(s);
  Mat out = s * v;
  if (weights) *weights = std::move(s);
  return out;
}

// ---- packed forward / backward ------------------------------------------------

struct LayerCache {
  Mat x, q, k, v, cat;
  std::vector<Mat> probs;  // [example * heads + head], S × S
  Mat y1;
  NormCache n1;
  Mat z1, f1, g;
  NormCache n2;
  Mat m1, m2;  // dropout masks, scaled; empty when off
};

struct ForwardCache {
  std::vector<std::size_t> s_off, s_len, c_off, c_len;
  Mat h_in, a_in;
  std::vector<LayerCache> layers;
  Mat enc;
  Mat at, cq, ck, cv, ccat;
  std::vector<Mat> cprobs;  // [example * heads + head], C × S
  Mat aatt;
  Mat left;  // rows fed to the step half of fc1: enc (joint) or per-example means (action-only)
  Mat zh, za;
};

namespace {

void check_batch(const RankerConfig& cfg, const std::vector<Example>& batch) {
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    const std::string where = "example " + std::to_string(b) + ": ";
    if (static_cast<std::size_t>(ex.steps.cols()) != cfg.input_dim ||
        static_cast<std::size_t>(ex.cands.cols()) != cfg.input_dim) {
      fail(ErrorCode::ShapeMismatch, where + "embedding width differs from input_dim " + std::to_string(cfg.input_dim));
    }
    if (static_cast<std::size_t>(ex.steps.rows()) > cfg.max_steps) {
      fail(ErrorCode::ShapeMismatch, where + "more steps than max_steps");
    }
    if (static_cast<std::size_t>(ex.cands.rows()) > cfg.max_candidates) {
      fail(ErrorCode::ShapeMismatch, where + "more candidates than max_candidates");
    }
    if (ex.steps.rows() == 0) fail(ErrorCode::AllKeysMasked, where + "no unmasked steps");
    if (!ex.positions.empty() && ex.positions.size() != static_cast<std::size_t>(ex.steps.rows())) {
      fail(ErrorCode::ShapeMismatch, where + "positions do not match steps");
    }
  }
}

// Multi-head attention of query rows [qo, qo+nq) against key rows [ko, ko+nk).
void mha(const Mat& q, const Mat& k, const Mat& v, std::size_t qo, std::size_t nq, std::size_t ko, std::size_t nk,
         std::size_t heads, Mat& cat, std::vector<Mat>& probs) {
  const auto dk = static_cast<Eigen::Index>(q.cols() / static_cast<Eigen::Index>(heads));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto qi = static_cast<Eigen::Index>(qo), ki = static_cast<Eigen::Index>(ko);
  const auto qn = static_cast<Eigen::Index>(nq), kn = static_cast<Eigen::Index>(nk);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dk;
    const Mat kt = k.block(ki, c0, kn, dk).transpose();
    Mat p = mm(q.block(qi, c0, qn, dk), kt) * scale;
    softmax_rows(p);
    cat.block(qi, c0, qn, dk) = mm(p, v.block(ki, c0, kn, dk));
    probs.push_back(std::move(p));
  }
}

void mha_back(const Mat& q, const Mat& k, const Mat& v, std::size_t qo, std::size_t nq, std::size_t ko,
              std::size_t nk, std::size_t heads, const Mat* probs, const Mat& dcat, Mat& dq, Mat& dk_out,
              Mat& dv) {
  const auto dk = static_cast<Eigen::Index>(q.cols() / static_cast<Eigen::Index>(heads));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto qi = static_cast<Eigen::Index>(qo), ki = static_cast<Eigen::Index>(ko);
  const auto qn = static_cast<Eigen::Index>(nq), kn = static_cast<Eigen::Index>(nk);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dk;
    const Mat& p = probs[h];
    const Mat dch = dcat.block(qi, c0, qn, dk);
    const Mat dp = dch * v.block(ki, c0, kn, dk).transpose();
    dv.block(ki, c0, kn, dk).noalias() += p.transpose() * dch;
    const Mat ds = softmax_back(p, dp) * scale;
    dq.block(qi, c0, qn, dk).noalias() += ds * k.block(ki, c0, kn, dk);
    dk_out.block(ki, c0, kn, dk).noalias() += ds.transpose() * q.block(qi, c0, qn, dk);
  }
}

}  // namespace

ForwardResult forward(const RankerParams& params, const RankerConfig& cfg, const std::vector<Example>& batch,
                      bool keep_cache, const Dropout& dropout) {
  check_batch(cfg, batch);
  if (!(dropout.rate >= 0.0 && dropout.rate < 1.0)) fail(ErrorCode::InvalidConfig, "dropout rate must lie in [0, 1)");
  Rng drop_rng(dropout.seed);
  auto drop_mask = [&](Eigen::Index rows, Eigen::Index cols) {
    const double keep = 1.0 / (1.0 - dropout.rate);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = drop_rng.uniform() < dropout.rate ? 0.0 : keep;
    return m;
  };
  auto cache = std::make_shared<ForwardCache>();
  ForwardCache& c = *cache;
  const std::size_t nb = batch.size();
  const std::size_t heads = cfg.n_heads;
  const auto dm = static_cast<Eigen::Index>(cfg.d_model);
  const auto din = static_cast<Eigen::Index>(cfg.input_dim);

  std::size_t ts = 0, tc = 0;
  for (const auto& ex : batch) {
    c.s_off.push_back(ts);
    c.s_len.push_back(static_cast<std::size_t>(ex.steps.rows()));
    c.c_off.push_back(tc);
    c.c_len.push_back(static_cast<std::size_t>(ex.cands.rows()));
    ts += c.s_len.back();
    tc += c.c_len.back();
  }
  c.h_in.resize(static_cast<Eigen::Index>(ts), din);
  c.a_in.resize(static_cast<Eigen::Index>(tc), din);
  std::vector<std::size_t> positions;
  positions.reserve(ts);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& ex = batch[b];
    if (ex.steps.rows() > 0) c.h_in.middleRows(static_cast<Eigen::Index>(c.s_off[b]), ex.steps.rows()) = ex.steps;
    if (ex.cands.rows() > 0) c.a_in.middleRows(static_cast<Eigen::Index>(c.c_off[b]), ex.cands.rows()) = ex.cands;
    for (std::size_t s = 0; s < c.s_len[b]; ++s) positions.push_back(ex.positions.empty() ? s : ex.positions[s]);
  }

  Mat x = affine(c.h_in, params.proj_h) + positional_encoding(positions, cfg.d_model);
  for (const auto& layer : params.layers) {
    LayerCache lc;
    lc.x = std::move(x);
    lc.q = affine(lc.x, layer.q);
    lc.k = affine(lc.x, layer.k);
    lc.v = affine(lc.x, layer.v);
    lc.cat.resize(lc.x.rows(), dm);
    for (std::size_t b = 0; b < nb; ++b) {
      mha(lc.q, lc.k, lc.v, c.s_off[b], c.s_len[b], c.s_off[b], c.s_len[b], heads, lc.cat, lc.probs);
    }
    Mat att = affine(lc.cat, layer.o);
    if (dropout.rate > 0.0) {
      lc.m1 = drop_mask(att.rows(), att.cols());
      att = att.cwiseProduct(lc.m1);
    }
    lc.y1 = lc.x + att;
    lc.z1 = layer_norm(lc.y1, layer.ln1, lc.n1);
    lc.f1 = affine(lc.z1, layer.ff1);
    lc.g = gelu(lc.f1);
    Mat ff = affine(lc.g, layer.ff2);
    if (dropout.rate > 0.0) {
      lc.m2 = drop_mask(ff.rows(), ff.cols());
      ff = ff.cwiseProduct(lc.m2);
    }
    const Mat y2 = lc.z1 + ff;
    x = layer_norm(y2, layer.ln2, lc.n2);
    c.layers.push_back(std::move(lc));
  }
  c.enc = std::move(x);

  c.at = affine(c.a_in, params.proj_a);
  c.cq = affine(c.at, params.cross_q);
  c.ck = affine(c.enc, params.cross_k);
  c.cv = affine(c.enc, params.cross_v);
  c.ccat.resize(static_cast<Eigen::Index>(tc), dm);
  for (std::size_t b = 0; b < nb; ++b) {
    mha(c.cq, c.ck, c.cv, c.c_off[b], c.c_len[b], c.s_off[b], c.s_len[b], heads, c.ccat, c.cprobs);
  }
  c.aatt = affine(c.ccat, params.cross_o);

  const auto w1h = params.fc1.w.topRows(dm);
  const auto w1a = params.fc1.w.bottomRows(dm);
  const bool joint = cfg.head == HeadMode::joint;
  if (joint) {
    c.left = c.enc;
  } else {
    c.left.resize(static_cast<Eigen::Index>(nb), dm);
    for (std::size_t b = 0; b < nb; ++b) {
      c.left.row(static_cast<Eigen::Index>(b)) =
          c.enc.middleRows(static_cast<Eigen::Index>(c.s_off[b]), static_cast<Eigen::Index>(c.s_len[b]))
              .colwise()
              .mean();
    }
  }
  c.zh = mm(c.left, w1h);
  c.za = mm(c.aatt, w1a);
  c.za.rowwise() += params.fc1.b.row(0);

  ForwardResult out;
  const double b2 = params.fc2.b(0, 0);
  const double* w2 = params.fc2.w.data();
  const auto hid = static_cast<std::size_t>(cfg.mlp_hidden);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t rows = joint ? c.s_len[b] : 1;
    const std::size_t row0 = joint ? c.s_off[b] : b;
    Mat logits(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(c.c_len[b]));
    for (std::size_t s = 0; s < rows; ++s) {
      const double* zh = c.zh.row(static_cast<Eigen::Index>(row0 + s)).data();
      for (std::size_t j = 0; j < c.c_len[b]; ++j) {
        const double* za = c.za.row(static_cast<Eigen::Index>(c.c_off[b] + j)).data();
        double acc = 0.0;
        for (std::size_t u = 0; u < hid; ++u) acc += gelu(zh[u] + za[u]) * w2[u];
        logits(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) = acc + b2;
      }
    }
    if (!logits.allFinite()) fail(ErrorCode::NonFiniteActivation, "non-finite logit in example " + std::to_string(b));
    out.logits.push_back(std::move(logits));

    Mat w = Mat::Zero(static_cast<Eigen::Index>(c.c_len[b]), static_cast<Eigen::Index>(c.s_len[b]));
    for (std::size_t h = 0; h < heads; ++h) w += c.cprobs[b * heads + h];
    out.cross_weights.push_back(w / static_cast<double>(heads));
  }
  if (keep_cache) out.cache = std::move(cache);
  return out;
}

void backward(const RankerParams& params, const RankerConfig& cfg, const ForwardResult& fwd,
              const std::vector<Mat>& d_logits, RankerParams& grads) {
  if (!fwd.cache) fail(ErrorCode::InvalidConfig, "backward needs a forward pass run with keep_cache");
  const ForwardCache& c = *fwd.cache;
  const std::size_t nb = c.s_len.size();
  if (d_logits.size() != nb) fail(ErrorCode::ShapeMismatch, "one logit gradient per example expected");
  const std::size_t heads = cfg.n_heads;
  const auto dm = static_cast<Eigen::Index>(cfg.d_model);
  const bool joint = cfg.head == HeadMode::joint;

  // pair MLP
  Mat dzh = Mat::Zero(c.zh.rows(), c.zh.cols());
  Mat dza = Mat::Zero(c.za.rows(), c.za.cols());
  const auto w2 = params.fc2.w.col(0).transpose();
  Eigen::RowVectorXd dw2 = Eigen::RowVectorXd::Zero(w2.size());
  double db2 = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t rows = joint ? c.s_len[b] : 1;
    const std::size_t row0 = joint ? c.s_off[b] : b;
    const Mat& dl = d_logits[b];
    if (static_cast<std::size_t>(dl.rows()) != rows || static_cast<std::size_t>(dl.cols()) != c.c_len[b]) {
      fail(ErrorCode::ShapeMismatch, "logit gradient shape differs from logits in example " + std::to_string(b));
    }
    for (std::size_t s = 0; s < rows; ++s) {
      const auto hr = static_cast<Eigen::Index>(row0 + s);
      for (std::size_t j = 0; j < c.c_len[b]; ++j) {
        const double d = dl(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j));
        if (d == 0.0) continue;
        const auto ar = static_cast<Eigen::Index>(c.c_off[b] + j);
        const Eigen::RowVectorXd z = c.zh.row(hr) + c.za.row(ar);
        dw2 += d * z.unaryExpr([](double v) { return gelu(v); });
        db2 += d;
        const Eigen::RowVectorXd dz = d * w2.cwiseProduct(z.unaryExpr([](double v) { return gelu_grad(v); }));
        dzh.row(hr) += dz;
        dza.row(ar) += dz;
      }
    }
  }
  grads.fc2.w.col(0) += dw2.transpose();
  grads.fc2.b(0, 0) += db2;
  grads.fc1.w.topRows(dm).noalias() += c.left.transpose() * dzh;
  grads.fc1.w.bottomRows(dm).noalias() += c.aatt.transpose() * dza;
  grads.fc1.b += dza.colwise().sum();
  const Mat dleft = dzh * params.fc1.w.topRows(dm).transpose();
  const Mat daatt = dza * params.fc1.w.bottomRows(dm).transpose();

  Mat denc;
  if (joint) {
    denc = dleft;
  } else {
    denc = Mat::Zero(c.enc.rows(), dm);
    for (std::size_t b = 0; b < nb; ++b) {
      const double inv = 1.0 / static_cast<double>(c.s_len[b]);
      for (std::size_t s = 0; s < c.s_len[b]; ++s) {
        denc.row(static_cast<Eigen::Index>(c.s_off[b] + s)) += inv * dleft.row(static_cast<Eigen::Index>(b));
      }
    }
  }

  // cross attention
  affine_grad(c.ccat, daatt, grads.cross_o);
  const Mat dccat = daatt * params.cross_o.w.transpose();
  Mat dcq = Mat::Zero(c.cq.rows(), dm), dck = Mat::Zero(c.ck.rows(), dm), dcv = Mat::Zero(c.cv.rows(), dm);
  for (std::size_t b = 0; b < nb; ++b) {
    mha_back(c.cq, c.ck, c.cv, c.c_off[b], c.c_len[b], c.s_off[b], c.s_len[b], heads, &c.cprobs[b * heads], dccat,
             dcq, dck, dcv);
  }
  affine_grad(c.at, dcq, grads.cross_q);
  affine_grad(c.enc, dck, grads.cross_k);
  affine_grad(c.enc, dcv, grads.cross_v);
  const Mat dat = dcq * params.cross_q.w.transpose();
  denc.noalias() += dck * params.cross_k.w.transpose();
  denc.noalias() += dcv * params.cross_v.w.transpose();
  affine_grad(c.a_in, dat, grads.proj_a);

  // encoder, last layer first
  Mat dx = std::move(denc);
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const EncoderLayer& layer = params.layers[li];
    EncoderLayer& g = grads.layers[li];
    const LayerCache& lc = c.layers[li];
    const Mat dy2 = layer_norm_back(dx, layer.ln2, lc.n2, g.ln2);
    const Mat dff = lc.m2.size() ? Mat(dy2.cwiseProduct(lc.m2)) : dy2;
    affine_grad(lc.g, dff, g.ff2);
    Mat df1 = dff * layer.ff2.w.transpose();
    df1 = df1.cwiseProduct(lc.f1.unaryExpr([](double v) { return gelu_grad(v); }));
    affine_grad(lc.z1, df1, g.ff1);
    const Mat dz1 = dy2 + df1 * layer.ff1.w.transpose();
    const Mat dy1 = layer_norm_back(dz1, layer.ln1, lc.n1, g.ln1);
    const Mat datt = lc.m1.size() ? Mat(dy1.cwiseProduct(lc.m1)) : dy1;
    affine_grad(lc.cat, datt, g.o);
    const Mat dcat = datt * layer.o.w.transpose();
    Mat dq = Mat::Zero(lc.q.rows(), dm), dk = Mat::Zero(lc.k.rows(), dm), dv = Mat::Zero(lc.v.rows(), dm);
    for (std::size_t b = 0; b < nb; ++b) {
      mha_back(lc.q, lc.k, lc.v, c.s_off[b], c.s_len[b], c.s_off[b], c.s_len[b], heads, &lc.probs[b * heads], dcat,
               dq, dk, dv);
    }
    affine_grad(lc.x, dq, g.q);
    affine_grad(lc.x, dk, g.k);
    affine_grad(lc.x, dv, g.v);
    dx = dy1;
    dx.noalias() += dq * layer.q.w.transpose();
    dx.noalias() += dk * layer.k.w.transpose();
    dx.noalias() += dv * layer.v.w.transpose();
  }
  affine_grad(c.h_in, dx, grads.proj_h);
}

LogitMatrix pad_logits(const std::vector<Mat>& logits) {
  LogitMatrix m;
  m.batch = logits.size();
  for (const auto& l : logits) {
    m.steps = std::max(m.steps, static_cast<std::size_t>(l.rows()));
    m.cands = std::max(m.cands, static_cast<std::size_t>(l.cols()));
  }
  m.values.assign(m.batch * m.steps * m.cands, kMaskedLogit);
  m.step_mask.assign(m.batch * m.steps, 0);
  m.cand_mask.assign(m.batch * m.cands, 0);
  for (std::size_t b = 0; b < m.batch; ++b) {
    const Mat& l = logits[b];
    for (Eigen::Index s = 0; s < l.rows(); ++s) {
      m.step_mask[b * m.steps + static_cast<std::size_t>(s)] = 1;
      for (Eigen::Index j = 0; j < l.cols(); ++j) {
        m.values[(b * m.steps + static_cast<std::size_t>(s)) * m.cands + static_cast<std::size_t>(j)] = l(s, j);
      }
    }
    for (Eigen::Index j = 0; j < l.cols(); ++j) m.cand_mask[b * m.cands + static_cast<std::size_t>(j)] = 1;
  }
  return m;
}

LogitMatrix forward_padded(const RankerParams& params, const RankerConfig& cfg, const PaddedInput& in) {
  const std::size_t B = in.batch, S = in.steps, C = in.cands, D = in.dim;
  if (in.h.size() != B * S * D || in.a.size() != B * C * D || in.step_mask.size() != B * S ||
      in.cand_mask.size() != B * C) {
    fail(ErrorCode::ShapeMismatch, "padded input buffers disagree with the declared shape");
  }
  std::vector<Example> batch(B);
  std::vector<std::vector<std::size_t>> cand_pos(B);
  for (std::size_t b = 0; b < B; ++b) {
    Example& ex = batch[b];
    for (std::size_t s = 0; s < S; ++s) {
      if (in.step_mask[b * S + s]) ex.positions.push_back(s);
    }
    for (std::size_t j = 0; j < C; ++j) {
      if (in.cand_mask[b * C + j]) cand_pos[b].push_back(j);
    }
    ex.steps.resize(static_cast<Eigen::Index>(ex.positions.size()), static_cast<Eigen::Index>(D));
    for (std::size_t r = 0; r < ex.positions.size(); ++r) {
      for (std::size_t d = 0; d < D; ++d) {
        ex.steps(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = in.h[(b * S + ex.positions[r]) * D + d];
      }
    }
    ex.cands.resize(static_cast<Eigen::Index>(cand_pos[b].size()), static_cast<Eigen::Index>(D));
    for (std::size_t r = 0; r < cand_pos[b].size(); ++r) {
      for (std::size_t d = 0; d < D; ++d) {
        ex.cands(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = in.a[(b * C + cand_pos[b][r]) * D + d];
      }
    }
  }
  const auto fwd = forward(params, cfg, batch);

  LogitMatrix m;
  m.batch = B;
  m.steps = cfg.head == HeadMode::joint ? S : 1;
  m.cands = C;
  m.values.assign(B * m.steps * C, kMaskedLogit);
  m.step_mask = cfg.head == HeadMode::joint ? in.step_mask : std::vector<std::uint8_t>(B, 1);
  m.cand_mask = in.cand_mask;
  for (std::size_t b = 0; b < B; ++b) {
    const Mat& l = fwd.logits[b];
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      const std::size_t s = cfg.head == HeadMode::joint ? batch[b].positions[static_cast<std::size_t>(r)] : 0;
      for (Eigen::Index j = 0; j < l.cols(); ++j) {
        m.values[(b * m.steps + s) * C + cand_pos[b][static_cast<std::size_t>(j)]] = l(r, j);
      }
    }
  }
  return m;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

[[noreturn]] void bad_ckpt(const std::string& m) { fail(ErrorCode::BadCheckpoint, m); }

void put_u64(ByteWriter& w, std::uint64_t v) {
  w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(v >> 32));
}

bool get_u64(ByteReader& r, std::uint64_t& v) {
  std::uint32_t lo = 0, hi = 0;
  if (!r.u32(lo) || !r.u32(hi)) return false;
  v = (static_cast<std::uint64_t>(hi) << 32) | lo;
  return true;
}

void put_str(ByteWriter& w, std::string_view s) {
  if (s.size() > 0xFFFF) fail(ErrorCode::InvalidConfig, "checkpoint string too long");
  w.u16(static_cast<std::uint16_t>(s.size()));
  w.raw(s);
}

bool get_str(ByteReader& r, std::string& s) {
  std::uint16_t n = 0;
  std::string_view v;
  if (!r.u16(n) || !r.raw(n, v)) return false;
  s = std::string(v);
  return true;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const RankerConfig& c = ckpt.config;
  ByteWriter w;
  w.raw(kCheckpointMagic);
  for (std::size_t v : {c.input_dim, c.d_model, c.n_layers, c.n_heads, c.mlp_hidden, c.max_steps, c.max_candidates}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u8(static_cast<std::uint8_t>(c.head));
  w.u8(ckpt.candidates.retrieval ? 1 : 0);
  w.u32(ckpt.candidates.k_ep);
  put_str(w, ckpt.candidates.embedder);
  w.u32(ckpt.candidates.hashing_dim);
  put_u64(w, ckpt.candidates.hashing_seed);

  std::uint32_t count = 0;
  ckpt.params.visit([&](const std::string&, const Mat&) { ++count; });
  w.u32(count);
  ckpt.params.visit([&](const std::string& name, const Mat& m) {
    put_str(w, name);
    w.u8(2);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
  });
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  std::string_view magic;
  if (!r.raw(kCheckpointMagic.size(), magic) || magic != kCheckpointMagic) bad_ckpt("bad magic");
  Checkpoint ck;
  RankerConfig& c = ck.config;
  std::uint32_t f[7];
  for (auto& v : f) {
    if (!r.u32(v)) bad_ckpt("truncated config");
  }
  c.input_dim = f[0];
  c.d_model = f[1];
  c.n_layers = f[2];
  c.n_heads = f[3];
  c.mlp_hidden = f[4];
  c.max_steps = f[5];
  c.max_candidates = f[6];
  std::uint8_t head = 0, retrieval = 0;
  if (!r.u8(head) || !r.u8(retrieval) || head > 1 || retrieval > 1) bad_ckpt("bad head or candidate mode");
  c.head = static_cast<HeadMode>(head);
  ck.candidates.retrieval = retrieval == 1;
  if (!r.u32(ck.candidates.k_ep) || !get_str(r, ck.candidates.embedder) || !r.u32(ck.candidates.hashing_dim) ||
      !get_u64(r, ck.candidates.hashing_seed)) {
    bad_ckpt("truncated candidate policy");
  }
  if (c.n_layers > 64 || c.d_model > 8192 || c.mlp_hidden > 65536 || c.input_dim > 65536) {
    bad_ckpt("implausible model size");
  }
  try {
    c.validate();
  } catch (const Error& e) {
    bad_ckpt(std::string("config: ") + e.what());
  }

  ck.params = RankerParams::zeros(c);
  std::uint32_t count = 0, expected = 0;
  ck.params.visit([&](const std::string&, const Mat&) { ++expected; });
  if (!r.u32(count) || count != expected) bad_ckpt("tensor count differs from the configuration");
  ck.params.visit([&](const std::string& want, Mat& m) {
    std::string name;
    std::uint8_t rank = 0;
    std::uint32_t rows = 0, cols = 0;
    if (!get_str(r, name) || name != want) bad_ckpt("expected tensor '" + want + "'");
    if (!r.u8(rank) || rank != 2 || !r.u32(rows) || !r.u32(cols)) bad_ckpt("bad header for '" + want + "'");
    if (rows != m.rows() || cols != m.cols()) {
      bad_ckpt("shape of '" + want + "' is " + std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
               std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      float v = 0.0F;
      if (!r.f32(v)) bad_ckpt("truncated data for '" + want + "'");
      if (!std::isfinite(v)) bad_ckpt("non-finite value in '" + want + "'");
      m.data()[i] = v;
    }
  });
  if (r.remaining() != 0) bad_ckpt("trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    bad_ckpt(e.what());
  }
  return parse_checkpoint(bytes);
}

}  // namespace niab
