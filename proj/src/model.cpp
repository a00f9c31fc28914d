#include "editmf/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "editmf/digest.hpp"
#include "editmf/error.hpp"
#include "editmf/rng.hpp"

namespace editmf {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;
constexpr std::uint8_t kFormatVersion = 1;
constexpr char kMagic[4] = {'E', 'D', 'M', 'F'};

struct Segment {
  int offset = 0;
  int length = 0;
};

struct LayerCache {
  Matrix xhat1;
  Vector rstd1;
  Matrix a1;
  Matrix qkv;
  std::vector<Matrix> probs;  // segment-major, head-minor
  Matrix attn;
  Matrix xhat2;
  Vector rstd2;
  Matrix a2;
  Matrix hpre;
  Matrix act;
};

struct Cache {
  std::vector<LayerCache> layers;
  Matrix xhatf;
  Vector rstdf;
  Matrix yf;
};

void layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, Matrix& out,
                Matrix* xhat_out, Vector* rstd_out) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  out.resize(n, d);
  if (xhat_out != nullptr) xhat_out->resize(n, d);
  if (rstd_out != nullptr) rstd_out->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    const Eigen::RowVectorXd xhat = (x.row(i).array() - mean) * rstd;
    out.row(i) = xhat.array() * gain.transpose().array() + bias.transpose().array();
    if (xhat_out != nullptr) xhat_out->row(i) = xhat;
    if (rstd_out != nullptr) (*rstd_out)(i) = rstd;
  }
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd,
                           const Vector& gain, Vector* dgain, Vector* dbias) {
  if (dgain != nullptr) *dgain += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  if (dbias != nullptr) *dbias += dy.colwise().sum().transpose();
  const Matrix dxhat = dy.array().rowwise() * gain.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

Matrix linear(const Matrix& x, const Matrix& weight, const Vector& bias) {
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.transpose();
  return y;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
}

double gelu_derivative(double x) {
  const double t = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
}

void attention_forward(const Matrix& qkv, const std::vector<Segment>& segments, int heads,
                       int width, Matrix& out, std::vector<Matrix>* probs_out) {
  const int dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  out.setZero(qkv.rows(), width);
  if (probs_out != nullptr) probs_out->clear();
  for (const auto& seg : segments) {
    const int t = seg.length;
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(seg.offset, h * dh, t, dh);
      const auto k = qkv.block(seg.offset, width + h * dh, t, dh);
      const auto v = qkv.block(seg.offset, 2 * width + h * dh, t, dh);
      Matrix p = (q * k.transpose()) * scale;
      for (int i = 0; i < t; ++i) {
        const double m = p.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - m);
          sum += p(i, j);
        }
        for (int j = 0; j <= i; ++j) p(i, j) /= sum;
        for (int j = i + 1; j < t; ++j) p(i, j) = 0.0;
      }
      out.block(seg.offset, h * dh, t, dh) = p * v;
      if (probs_out != nullptr) probs_out->push_back(std::move(p));
    }
  }
}

Matrix attention_backward(const Matrix& dout, const Matrix& qkv,
                          const std::vector<Segment>& segments, const std::vector<Matrix>& probs,
                          int heads, int width) {
  const int dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix dqkv = Matrix::Zero(qkv.rows(), qkv.cols());
  std::size_t idx = 0;
  for (const auto& seg : segments) {
    const int t = seg.length;
    for (int h = 0; h < heads; ++h, ++idx) {
      const Matrix& p = probs[idx];
      const auto q = qkv.block(seg.offset, h * dh, t, dh);
      const auto k = qkv.block(seg.offset, width + h * dh, t, dh);
      const auto v = qkv.block(seg.offset, 2 * width + h * dh, t, dh);
      const auto d_o = dout.block(seg.offset, h * dh, t, dh);
      const Matrix dp = d_o * v.transpose();
      Matrix ds = p.cwiseProduct(dp);
      const Vector row_dot = ds.rowwise().sum();
      ds -= (p.array().colwise() * row_dot.array()).matrix();
      dqkv.block(seg.offset, h * dh, t, dh) = ds * k * scale;
      dqkv.block(seg.offset, width + h * dh, t, dh) = ds.transpose() * q * scale;
      dqkv.block(seg.offset, 2 * width + h * dh, t, dh) = p.transpose() * d_o;
    }
  }
  return dqkv;
}

void check_tokens(const ModelState& model, const Tokens& tokens, std::size_t begin,
                  std::size_t length) {
  if (length == 0) fail(ErrorCode::kLength, "token sequence is empty");
  if (length > static_cast<std::size_t>(model.config.max_seq_len)) {
    fail(ErrorCode::kLength, "sequence of " + std::to_string(length) +
                                 " tokens exceeds max_seq_len " +
                                 std::to_string(model.config.max_seq_len));
  }
  for (std::size_t i = begin; i < begin + length; ++i) {
    if (tokens[i] < 0 || tokens[i] >= model.config.vocab_size) {
      fail(ErrorCode::kArgument, "token id " + std::to_string(tokens[i]) + " out of range");
    }
  }
}

Matrix embed(const ModelState& model, const Tokens& tokens, const std::vector<Segment>& segments) {
  Matrix x(static_cast<Eigen::Index>(tokens.size()), model.config.hidden_dim);
  for (const auto& seg : segments) {
    for (int i = 0; i < seg.length; ++i) {
      const int row = seg.offset + i;
      x.row(row) = model.token_embedding.row(tokens[static_cast<std::size_t>(row)]) +
                   model.position_embedding.row(i);
    }
  }
  return x;
}

void run_blocks(const ModelState& model, Matrix& x, const std::vector<Segment>& segments,
                int first_layer, Cache* cache, const HiddenHook* hook, const CaptureSpec* capture,
                ActivationTrace* trace) {
  const auto& cfg = model.config;
  for (int l = first_layer; l < cfg.layer_count; ++l) {
    const LayerWeights& w = model.layers[static_cast<std::size_t>(l)];
    LayerCache local;
    LayerCache& c = cache != nullptr ? cache->layers[static_cast<std::size_t>(l)] : local;
    const bool keep = cache != nullptr;

    layer_norm(x, w.ln1_gain, w.ln1_bias, c.a1, keep ? &c.xhat1 : nullptr,
               keep ? &c.rstd1 : nullptr);
    c.qkv = linear(c.a1, w.attn_qkv, w.attn_qkv_bias);
    attention_forward(c.qkv, segments, cfg.head_count, cfg.hidden_dim, c.attn,
                      keep ? &c.probs : nullptr);
    x += linear(c.attn, w.attn_out, w.attn_out_bias);

    layer_norm(x, w.ln2_gain, w.ln2_bias, c.a2, keep ? &c.xhat2 : nullptr,
               keep ? &c.rstd2 : nullptr);
    c.hpre = linear(c.a2, w.mlp_in, w.mlp_in_bias);
    c.act = c.hpre.unaryExpr([](double v) { return gelu(v); });
    Matrix mlp = linear(c.act, w.mlp_out, w.mlp_out_bias);
    x += mlp;

    if (hook != nullptr && *hook) (*hook)(l, x);
    if (capture != nullptr && trace != nullptr && capture->wants(l)) {
      const auto li = static_cast<std::size_t>(l);
      if (capture->hidden) trace->hidden[li] = x;
      if (capture->keys) trace->keys[li] = c.act;
      if (capture->values) trace->values[li] = std::move(mlp);
    }
  }
}

Matrix head(const ModelState& model, const Matrix& x, Cache* cache) {
  Matrix y;
  if (cache != nullptr) {
    layer_norm(x, model.final_gain, model.final_bias, cache->yf, &cache->xhatf, &cache->rstdf);
    return cache->yf * model.unembedding.transpose();
  }
  layer_norm(x, model.final_gain, model.final_bias, y, nullptr, nullptr);
  return y * model.unembedding.transpose();
}

Matrix run_model(const ModelState& model, const Tokens& tokens,
                 const std::vector<Segment>& segments, Cache* cache, const HiddenHook* hook,
                 const CaptureSpec* capture, ActivationTrace* trace) {
  for (const auto& seg : segments) {
    check_tokens(model, tokens, static_cast<std::size_t>(seg.offset),
                 static_cast<std::size_t>(seg.length));
  }
  if (cache != nullptr) cache->layers.assign(static_cast<std::size_t>(model.config.layer_count), {});
  Matrix x = embed(model, tokens, segments);
  if (hook != nullptr && *hook) (*hook)(-1, x);
  run_blocks(model, x, segments, 0, cache, hook, capture, trace);
  return head(model, x, cache);
}

constexpr int kNoSiteLayer = std::numeric_limits<int>::max();

// Reverse pass. Accumulates parameter gradients into `grads` when given and
// stores dLoss/d(block output at each site) into `site_grads`.
void backward(const ModelState& model, const Tokens& tokens, const std::vector<Segment>& segments,
              const Cache& cache, const Matrix& dlogits, ModelState* grads,
              std::span<const Site> sites = {}, std::vector<Vector>* site_grads = nullptr) {
  int lowest_site = kNoSiteLayer;
  for (const Site& s : sites) lowest_site = std::min(lowest_site, s.layer);
  if (site_grads != nullptr) site_grads->assign(sites.size(), Vector());
  const auto& cfg = model.config;
  if (grads != nullptr) grads->unembedding += dlogits.transpose() * cache.yf;
  const Matrix dyf = dlogits * model.unembedding;
  Matrix dx = layer_norm_backward(dyf, cache.xhatf, cache.rstdf, model.final_gain,
                                  grads ? &grads->final_gain : nullptr,
                                  grads ? &grads->final_bias : nullptr);
  for (int l = cfg.layer_count - 1; l >= 0; --l) {
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (sites[i].layer == l) (*site_grads)[i] = dx.row(sites[i].position).transpose();
    }
    if (grads == nullptr && l == lowest_site) return;
    const auto li = static_cast<std::size_t>(l);
    const LayerWeights& w = model.layers[li];
    const LayerCache& c = cache.layers[li];
    LayerWeights* g = grads != nullptr ? &grads->layers[li] : nullptr;

    if (g != nullptr) {
      g->mlp_out.noalias() += dx.transpose() * c.act;
      g->mlp_out_bias += dx.colwise().sum().transpose();
    }
    Matrix dh = dx * w.mlp_out;
    for (Eigen::Index i = 0; i < dh.rows(); ++i) {
      for (Eigen::Index j = 0; j < dh.cols(); ++j) dh(i, j) *= gelu_derivative(c.hpre(i, j));
    }
    if (g != nullptr) {
      g->mlp_in.noalias() += dh.transpose() * c.a2;
      g->mlp_in_bias += dh.colwise().sum().transpose();
    }
    const Matrix da2 = dh * w.mlp_in;
    dx += layer_norm_backward(da2, c.xhat2, c.rstd2, w.ln2_gain, g ? &g->ln2_gain : nullptr,
                              g ? &g->ln2_bias : nullptr);

    if (g != nullptr) {
      g->attn_out.noalias() += dx.transpose() * c.attn;
      g->attn_out_bias += dx.colwise().sum().transpose();
    }
    const Matrix dattn = dx * w.attn_out;
    const Matrix dqkv =
        attention_backward(dattn, c.qkv, segments, c.probs, cfg.head_count, cfg.hidden_dim);
    if (g != nullptr) {
      g->attn_qkv.noalias() += dqkv.transpose() * c.a1;
      g->attn_qkv_bias += dqkv.colwise().sum().transpose();
    }
    const Matrix da1 = dqkv * w.attn_qkv;
    dx += layer_norm_backward(da1, c.xhat1, c.rstd1, w.ln1_gain, g ? &g->ln1_gain : nullptr,
                              g ? &g->ln1_bias : nullptr);
  }
  if (grads != nullptr) {
    for (const auto& seg : segments) {
      for (int i = 0; i < seg.length; ++i) {
        const int row = seg.offset + i;
        grads->token_embedding.row(tokens[static_cast<std::size_t>(row)]) += dx.row(row);
        grads->position_embedding.row(i) += dx.row(row);
      }
    }
  }
}

std::vector<Segment> single_segment(const Tokens& tokens) {
  return {Segment{0, static_cast<int>(tokens.size())}};
}

void check_site(const ModelState& model, Site site, std::size_t seq_len) {
  if (site.layer < 0 || site.layer >= model.config.layer_count || site.position < 0 ||
      static_cast<std::size_t>(site.position) >= seq_len) {
    fail(ErrorCode::kArgument, "site (" + std::to_string(site.layer) + ", " +
                                   std::to_string(site.position) + ") out of bounds");
  }
}

HiddenHook injection_hook(std::span<const EditDelta> injections) {
  return [injections](int layer, Matrix& hidden) {
    for (const EditDelta& d : injections) {
      if (layer == d.site.layer) hidden.row(d.site.position) += d.vector.transpose();
    }
  };
}

void check_injections(const ModelState& model, std::span<const EditDelta> injections,
                      std::size_t seq_len) {
  for (const EditDelta& d : injections) {
    check_site(model, d.site, seq_len);
    if (d.vector.size() != model.config.hidden_dim) {
      fail(ErrorCode::kArgument, "injected vector has wrong length");
    }
    if (!d.vector.allFinite()) fail(ErrorCode::kNumeric, "injected vector is not finite");
  }
}

std::span<const EditDelta> as_span(const EditDelta* inject) {
  return inject != nullptr ? std::span<const EditDelta>(inject, 1) : std::span<const EditDelta>();
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorCode::kTruncated, std::string("weight file truncated while reading ") + what);
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32(const char* what) {
    const auto b = take(4, what);
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
           (std::uint32_t{b[3]} << 24);
  }

  double f64(const char* what) {
    const auto b = take(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{b[static_cast<std::size_t>(i)]} << (8 * i);
    return std::bit_cast<double>(bits);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
std::vector<std::uint32_t> dims_of(const T& tensor) {
  if constexpr (T::ColsAtCompileTime == 1) {
    return {static_cast<std::uint32_t>(tensor.size())};
  } else {
    return {static_cast<std::uint32_t>(tensor.rows()), static_cast<std::uint32_t>(tensor.cols())};
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (layer_count <= 0 || hidden_dim <= 0 || mlp_dim <= 0 || head_count <= 0 ||
      vocab_size <= 0 || max_seq_len <= 0) {
    fail(ErrorCode::kConfiguration, "model dimensions must be positive");
  }
  if (hidden_dim % head_count != 0) {
    fail(ErrorCode::kConfiguration, "hidden_dim must be divisible by head_count");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"layer_count", layer_count}, {"hidden_dim", hidden_dim},
                        {"mlp_dim", mlp_dim},         {"head_count", head_count},
                        {"vocab_size", vocab_size},   {"max_seq_len", max_seq_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layer_count = j.value("layer_count", c.layer_count);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  c.head_count = j.value("head_count", c.head_count);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  return c;
}

bool CaptureSpec::wants(int layer) const {
  return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
}

ModelState ModelState::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.hidden_dim;
  const int m = config.mlp_dim;
  ModelState s;
  s.config = config;
  s.token_embedding = Matrix::Zero(config.vocab_size, d);
  s.position_embedding = Matrix::Zero(config.max_seq_len, d);
  s.layers.resize(static_cast<std::size_t>(config.layer_count));
  for (auto& l : s.layers) {
    l.ln1_gain = Vector::Zero(d);
    l.ln1_bias = Vector::Zero(d);
    l.attn_qkv = Matrix::Zero(3 * d, d);
    l.attn_qkv_bias = Vector::Zero(3 * d);
    l.attn_out = Matrix::Zero(d, d);
    l.attn_out_bias = Vector::Zero(d);
    l.ln2_gain = Vector::Zero(d);
    l.ln2_bias = Vector::Zero(d);
    l.mlp_in = Matrix::Zero(m, d);
    l.mlp_in_bias = Vector::Zero(m);
    l.mlp_out = Matrix::Zero(d, m);
    l.mlp_out_bias = Vector::Zero(d);
  }
  s.final_gain = Vector::Zero(d);
  s.final_bias = Vector::Zero(d);
  s.unembedding = Matrix::Zero(config.vocab_size, d);
  return s;
}

ModelState ModelState::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelState s = zeros(config);
  Rng rng(seed);
  const double residual_scale = 0.02 / std::sqrt(2.0 * config.layer_count);
  auto fill = [&rng](auto& t, double std) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = std * rng.normal();
  };
  fill(s.token_embedding, 0.02);
  fill(s.position_embedding, 0.01);
  for (auto& l : s.layers) {
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    fill(l.attn_qkv, 0.02);
    fill(l.attn_out, residual_scale);
    fill(l.mlp_in, 0.02);
    fill(l.mlp_out, residual_scale);
  }
  s.final_gain.setOnes();
  fill(s.unembedding, 0.02);
  return s;
}

ForwardResult forward(const ModelState& model, const Tokens& tokens, const CaptureSpec& capture,
                      const EditDelta* inject) {
  return forward(model, tokens, capture, as_span(inject));
}

ForwardResult forward(const ModelState& model, const Tokens& tokens, const CaptureSpec& capture,
                      std::span<const EditDelta> injections) {
  check_injections(model, injections, tokens.size());
  ForwardResult result;
  const auto layers = static_cast<std::size_t>(model.config.layer_count);
  if (capture.hidden) result.trace.hidden.resize(layers);
  if (capture.keys) result.trace.keys.resize(layers);
  if (capture.values) result.trace.values.resize(layers);
  const HiddenHook hook = injections.empty() ? HiddenHook{} : injection_hook(injections);
  result.logits =
      run_model(model, tokens, single_segment(tokens), nullptr, &hook, &capture, &result.trace);
  if (!result.logits.allFinite()) fail(ErrorCode::kNumeric, "non-finite logits in forward pass");
  return result;
}

Matrix forward_with_hook(const ModelState& model, const Tokens& tokens, const HiddenHook& hook) {
  return run_model(model, tokens, single_segment(tokens), nullptr, &hook, nullptr, nullptr);
}

Matrix forward_from_layer(const ModelState& model, int first_layer, Matrix hidden,
                          const HiddenHook& hook) {
  if (first_layer < 0 || first_layer > model.config.layer_count) {
    fail(ErrorCode::kArgument, "first_layer out of range");
  }
  const std::vector<Segment> segments{Segment{0, static_cast<int>(hidden.rows())}};
  run_blocks(model, hidden, segments, first_layer, nullptr, &hook, nullptr, nullptr);
  return head(model, hidden, nullptr);
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

Vector softmax(const Eigen::Ref<const Vector>& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  return e / e.sum();
}

TokenId argmax(const Eigen::Ref<const Vector>& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

Tokens generate_greedy(const ModelState& model, const Tokens& prompt, int max_new) {
  if (max_new < 0) fail(ErrorCode::kArgument, "max_new must be non-negative");
  if (prompt.empty()) fail(ErrorCode::kLength, "prompt is empty");
  if (prompt.size() + static_cast<std::size_t>(max_new) >
      static_cast<std::size_t>(model.config.max_seq_len)) {
    fail(ErrorCode::kLength, "prompt plus continuation exceeds max_seq_len");
  }
  Tokens seq = prompt;
  Tokens out;
  for (int step = 0; step < max_new; ++step) {
    const Matrix logits = forward(model, seq).logits;
    const TokenId next = argmax(logits.row(logits.rows() - 1).transpose());
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

std::vector<double> target_logprobs(const ModelState& model, const Tokens& prompt,
                                    const Tokens& target, const EditDelta* inject) {
  return target_logprobs(model, prompt, target, as_span(inject));
}

std::vector<double> target_logprobs(const ModelState& model, const Tokens& prompt,
                                    const Tokens& target, std::span<const EditDelta> injections) {
  if (target.empty()) fail(ErrorCode::kArgument, "target is empty");
  if (prompt.empty()) fail(ErrorCode::kLength, "prompt is empty");
  Tokens seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  const Matrix logp = log_softmax_rows(forward(model, seq, {}, injections).logits);
  std::vector<double> out;
  for (std::size_t i = 0; i < target.size(); ++i) {
    out.push_back(logp(static_cast<Eigen::Index>(prompt.size() - 1 + i), target[i]));
  }
  return out;
}

double sequence_logprob(const ModelState& model, const Tokens& prompt, const Tokens& target,
                        const EditDelta* inject) {
  double total = 0.0;
  for (double lp : target_logprobs(model, prompt, target, inject)) total += lp;
  return total;
}

DeltaGradient loss_and_delta_gradient(const ModelState& model, const Tokens& tokens,
                                      const EditDelta& inject, const LogitLoss& loss) {
  auto multi = loss_and_delta_gradients(model, tokens, std::span<const EditDelta>(&inject, 1), loss);
  return DeltaGradient{multi.loss, std::move(multi.gradients.front())};
}

DeltaGradients loss_and_delta_gradients(const ModelState& model, const Tokens& tokens,
                                        std::span<const EditDelta> injections,
                                        const LogitLoss& loss) {
  check_injections(model, injections, tokens.size());
  const auto segments = single_segment(tokens);
  Cache cache;
  const HiddenHook hook = injection_hook(injections);
  const Matrix logits = run_model(model, tokens, segments, &cache, &hook, nullptr, nullptr);
  Matrix dlogits = Matrix::Zero(logits.rows(), logits.cols());
  DeltaGradients out;
  out.loss = loss(logits, dlogits);
  if (!std::isfinite(out.loss) || !dlogits.allFinite()) {
    fail(ErrorCode::kNumeric, "non-finite loss while differentiating injected delta");
  }
  std::vector<Site> sites;
  for (const EditDelta& d : injections) sites.push_back(d.site);
  backward(model, tokens, segments, cache, dlogits, nullptr, sites, &out.gradients);
  for (const Vector& g : out.gradients) {
    if (!g.allFinite()) fail(ErrorCode::kNumeric, "non-finite delta gradient");
  }
  return out;
}

Vector grad_wrt_delta(const ModelState& model, const Tokens& prompt, const Tokens& target,
                      Site site, const Vector* at) {
  if (target.empty()) fail(ErrorCode::kArgument, "target is empty");
  Tokens seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  EditDelta inject{site, at != nullptr ? *at : Vector::Zero(model.config.hidden_dim)};
  const auto first_row = static_cast<Eigen::Index>(prompt.size() - 1);
  const auto loss = [&](const Matrix& logits, Matrix& dlogits) {
    const Matrix logp = log_softmax_rows(logits);
    double nll = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const Eigen::Index row = first_row + static_cast<Eigen::Index>(i);
      nll -= logp(row, target[i]);
      dlogits.row(row) += logp.row(row).array().exp().matrix();
      dlogits(row, target[i]) -= 1.0;
    }
    return nll;
  };
  return loss_and_delta_gradient(model, seq, inject, loss).gradient;
}

double language_model_loss(const ModelState& model, std::span<const Tokens> sequences,
                           ModelState* grads) {
  Tokens packed;
  Tokens targets;
  std::vector<Segment> segments;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    segments.push_back(Segment{static_cast<int>(packed.size()), static_cast<int>(seq.size() - 1)});
    packed.insert(packed.end(), seq.begin(), seq.end() - 1);
    targets.insert(targets.end(), seq.begin() + 1, seq.end());
  }
  if (packed.empty()) fail(ErrorCode::kArgument, "no sequence has a next-token target");
  Cache cache;
  const Matrix logits = run_model(model, packed, segments, grads ? &cache : nullptr, nullptr,
                                  nullptr, nullptr);
  const Matrix logp = log_softmax_rows(logits);
  const double count = static_cast<double>(targets.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    loss -= logp(static_cast<Eigen::Index>(i), targets[i]);
  }
  loss /= count;
  if (!std::isfinite(loss)) fail(ErrorCode::kNumeric, "non-finite training loss");
  if (grads != nullptr) {
    Matrix dlogits = logp.array().exp().matrix();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      dlogits(static_cast<Eigen::Index>(i), targets[i]) -= 1.0;
    }
    dlogits /= count;
    backward(model, packed, segments, cache, dlogits, grads);
  }
  return loss;
}

std::vector<std::uint8_t> serialize_model(const ModelState& model) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kFormatVersion);
  const std::string config = model.config.to_json().dump();
  append_u32(out, static_cast<std::uint32_t>(config.size()));
  out.insert(out.end(), config.begin(), config.end());
  visit_tensors(
      [&out](const std::string& name, const auto& tensor) {
        append_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        const auto dims = dims_of(tensor);
        append_u32(out, static_cast<std::uint32_t>(dims.size()));
        for (auto d : dims) append_u32(out, d);
        // Row-major Matrix and Vector storage are both already in file order.
        for (Eigen::Index i = 0; i < tensor.size(); ++i) {
          const auto bits = std::bit_cast<std::uint64_t>(tensor.data()[i]);
          for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
        }
      },
      model);
  return out;
}

ModelState deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader reader(bytes);
  const auto magic = reader.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    fail(ErrorCode::kMagic, "not an EDMF weight file (bad magic bytes)");
  }
  const auto version = reader.take(1, "version")[0];
  if (version != kFormatVersion) {
    fail(ErrorCode::kVersion, "unsupported weight format version " + std::to_string(version));
  }
  const std::uint32_t config_len = reader.u32("config length");
  const auto config_bytes = reader.take(config_len, "config");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(config_bytes.begin(), config_bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kShape, std::string("unreadable config block: ") + e.what());
  }
  try {
    config.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kShape, std::string("invalid config block: ") + e.what());
  }

  ModelState model = ModelState::zeros(config);
  std::map<std::string, std::pair<double*, std::vector<std::uint32_t>>> slots;
  visit_tensors(
      [&slots](const std::string& name, auto& tensor) {
        slots.emplace(name, std::pair{tensor.data(), dims_of(tensor)});
      },
      model);

  std::map<std::string, bool> seen;
  while (!reader.done()) {
    const std::uint32_t name_len = reader.u32("tensor name length");
    const auto name_bytes = reader.take(name_len, "tensor name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    const auto it = slots.find(name);
    if (it == slots.end()) fail(ErrorCode::kShape, "unexpected tensor '" + name + "'");
    if (seen[name]) fail(ErrorCode::kShape, "tensor '" + name + "' appears twice");
    seen[name] = true;
    const std::uint32_t rank = reader.u32("tensor rank");
    std::vector<std::uint32_t> dims;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i) dims.push_back(reader.u32("tensor dims"));
    if (dims != it->second.second) {
      fail(ErrorCode::kShape, "tensor '" + name + "' dims do not match the config header");
    }
    std::size_t count = 1;
    for (auto d : dims) count *= d;
    for (std::size_t i = 0; i < count; ++i) it->second.first[i] = reader.f64("tensor values");
  }
  for (const auto& [name, slot] : slots) {
    if (!seen[name]) fail(ErrorCode::kShape, "tensor '" + name + "' missing from weight file");
  }
  return model;
}

void save_model(const ModelState& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModelState load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  ModelState model = deserialize_model(bytes);
  check_finite(model);
  return model;
}

std::string model_checksum(const ModelState& model) {
  return to_hex(sha256(std::span<const std::uint8_t>(serialize_model(model))));
}

void check_finite(const ModelState& model) {
  visit_tensors(
      [](const std::string& name, const auto& tensor) {
        if (!tensor.allFinite()) fail(ErrorCode::kNumeric, "non-finite weight in '" + name + "'");
      },
      model);
}

}  // namespace editmf
