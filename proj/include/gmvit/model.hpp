#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmvit/layers.hpp"
#include "gmvit/rng.hpp"

namespace gmvit {

enum class Variant { kTeacher, kSimple, kMini };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kTeacher: return "teacher";
    case Variant::kSimple: return "simple";
    case Variant::kMini: return "mini";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "teacher") return Variant::kTeacher;
  if (s == "simple") return Variant::kSimple;
  if (s == "mini") return Variant::kMini;
  throw ShapeError("unknown model variant '" + s + "'");
}

/// How camera positions become position embeddings: the spatial MLP over
/// camera coordinates, a conventional learned per-index table, or none.
enum class PeMode { kSpatial, kLearnedIndex, kNone };

inline std::string pe_mode_name(PeMode m) {
  switch (m) {
    case PeMode::kSpatial: return "spatial";
    case PeMode::kLearnedIndex: return "learned_index";
    case PeMode::kNone: return "none";
  }
  return "?";
}

inline PeMode pe_mode_from_name(const std::string& s) {
  if (s == "spatial") return PeMode::kSpatial;
  if (s == "learned_index") return PeMode::kLearnedIndex;
  if (s == "none") return PeMode::kNone;
  throw ShapeError("unknown pe mode '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::kTeacher;
  std::int64_t feature_dim = 64;   // D
  std::int64_t views = 20;         // N, must match the rig
  std::int64_t groups = 12;        // M
  std::int64_t view_vit_layers = 6;   // L
  std::int64_t group_vit_layers = 6;  // K
  std::int64_t heads = 8;
  std::int64_t expansion = 4;
  std::int64_t classes = 8;  // C
  std::int64_t input_channels = 1;
  std::int64_t image_h = 32;
  std::int64_t image_w = 32;
  double dropout_rate = 0.5;
  PeMode pe_mode = PeMode::kSpatial;
  bool token_weighted_pooling = true;
  // component-removal ablation switches
  bool use_view_vit = true;
  bool use_grouping = true;
  bool use_group_vit = true;

  std::int64_t retrieval_dim() const {
    return feature_dim < 256 ? std::min<std::int64_t>(256, 4 * feature_dim) : 256;
  }
  bool has_class_tokens() const { return variant != Variant::kMini; }
};

/// Applies the variant constraints (mini forces L = K = 0; simple forces
/// L = K = 1 with expansion 1) and validates the remaining fields.
inline ModelConfig normalized(ModelConfig cfg) {
  if (cfg.variant == Variant::kMini) {
    cfg.view_vit_layers = 0;
    cfg.group_vit_layers = 0;
  } else if (cfg.variant == Variant::kSimple) {
    cfg.view_vit_layers = 1;
    cfg.group_vit_layers = 1;
    cfg.expansion = 1;
  }
  detail::require(cfg.feature_dim >= 1 && cfg.groups >= 1 && cfg.classes >= 1 && cfg.views >= 1,
                  "model config: dimensions must be positive");
  detail::require(cfg.view_vit_layers >= 0 && cfg.group_vit_layers >= 0 && cfg.heads >= 1 &&
                      cfg.expansion >= 1,
                  "model config: encoder fields must be non-negative");
  if (cfg.variant != Variant::kMini)
    detail::require(cfg.feature_dim % cfg.heads == 0,
                    "model config: feature_dim " + detail::str(cfg.feature_dim) +
                        " not divisible by heads " + detail::str(cfg.heads));
  detail::require(cfg.image_h >= 8 && cfg.image_w >= 8, "model config: image size must be >= 8");
  detail::require(cfg.input_channels >= 1, "model config: input_channels must be >= 1");
  return cfg;
}

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["variant"] = variant_name(c.variant);
  j["feature_dim"] = c.feature_dim;
  j["views"] = c.views;
  j["groups"] = c.groups;
  j["view_vit_layers"] = c.view_vit_layers;
  j["group_vit_layers"] = c.group_vit_layers;
  j["heads"] = c.heads;
  j["expansion"] = c.expansion;
  j["classes"] = c.classes;
  j["input_channels"] = c.input_channels;
  j["image_h"] = c.image_h;
  j["image_w"] = c.image_w;
  j["dropout_rate"] = c.dropout_rate;
  j["pe_mode"] = pe_mode_name(c.pe_mode);
  j["token_weighted_pooling"] = c.token_weighted_pooling;
  j["use_view_vit"] = c.use_view_vit;
  j["use_grouping"] = c.use_grouping;
  j["use_group_vit"] = c.use_group_vit;
  j["retrieval_dim"] = c.retrieval_dim();
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.feature_dim = j.at("feature_dim");
  c.views = j.at("views");
  c.groups = j.at("groups");
  c.view_vit_layers = j.at("view_vit_layers");
  c.group_vit_layers = j.at("group_vit_layers");
  c.heads = j.at("heads");
  c.expansion = j.at("expansion");
  c.classes = j.at("classes");
  c.input_channels = j.at("input_channels");
  c.image_h = j.at("image_h");
  c.image_w = j.at("image_w");
  c.dropout_rate = j.at("dropout_rate");
  c.pe_mode = pe_mode_from_name(j.at("pe_mode").get<std::string>());
  c.token_weighted_pooling = j.at("token_weighted_pooling");
  c.use_view_vit = j.at("use_view_vit");
  c.use_grouping = j.at("use_grouping");
  c.use_group_vit = j.at("use_group_vit");
  return normalized(c);
}

// ---------------------------------------------------------------------------
// Grouping
// ---------------------------------------------------------------------------

constexpr double kTokenClampLo = 1e-7;
constexpr double kTokenClampHi = 1.0 - 1e-7;

/// Bin index (1-based) of a clamped token: the m with (m-1)/M <= t < m/M.
template <typename T>
std::int64_t group_bin(T token, std::int64_t m_groups) {
  return static_cast<std::int64_t>(std::floor(static_cast<double>(token) * m_groups)) + 1;
}

template <typename T>
std::vector<std::int64_t> group_assign(const std::vector<T>& clamped_tokens, std::int64_t m_groups) {
  detail::require(m_groups >= 1, "group_assign: need at least one group");
  std::vector<std::int64_t> assignment(clamped_tokens.size());
  for (std::size_t i = 0; i < clamped_tokens.size(); ++i)
    assignment[i] = group_bin(clamped_tokens[i], m_groups);
  return assignment;
}

template <typename T>
struct GroupingResult {
  Tensor<T> tokens;                      // [N x 1], clamped, live
  std::vector<std::int64_t> assignment;  // 1-based bin per view
  Tensor<T> group_features;              // [M x D] masked (zero rows for empty groups)
  std::vector<std::array<T, 3>> centroids;           // per group, zeros where empty
  std::vector<std::vector<std::int64_t>> members;    // per group view indices
  std::vector<char> non_empty;                       // per group
  std::vector<std::int64_t> non_empty_indices;       // 0-based slots with members
};

/// Pools view features into per-group features (columnwise max over the
/// members, optionally scaled by the mean member token) and computes each
/// group's centroid camera position. Empty groups stay zero-masked.
template <typename T>
GroupingResult<T> group_pool(const Tensor<T>& f_view, const Tensor<T>& tokens,
                             const std::vector<std::int64_t>& assignment,
                             const Tensor<T>& positions, std::int64_t m_groups,
                             bool token_weighted) {
  const std::int64_t n = f_view.rows(), d = f_view.cols();
  detail::require(static_cast<std::int64_t>(assignment.size()) == n,
                  "group_pool: assignment length != view count");
  detail::require(positions.rank() == 2 && positions.rows() == n && positions.cols() == 3,
                  "group_pool: positions must be [N x 3]");
  GroupingResult<T> res;
  res.tokens = tokens;
  res.assignment = assignment;
  res.members.assign(static_cast<std::size_t>(m_groups), {});
  res.centroids.assign(static_cast<std::size_t>(m_groups), {T(0), T(0), T(0)});
  res.non_empty.assign(static_cast<std::size_t>(m_groups), 0);
  for (std::int64_t v = 0; v < n; ++v) {
    const std::int64_t g = assignment[static_cast<std::size_t>(v)];
    detail::require(1 <= g && g <= m_groups, "group_pool: assignment outside [1, M]");
    res.members[static_cast<std::size_t>(g - 1)].push_back(v);
  }
  std::vector<Tensor<T>> pooled_rows;
  for (std::int64_t g = 0; g < m_groups; ++g) {
    const auto& mem = res.members[static_cast<std::size_t>(g)];
    if (mem.empty()) continue;
    res.non_empty[static_cast<std::size_t>(g)] = 1;
    res.non_empty_indices.push_back(g);
    auto& ctr = res.centroids[static_cast<std::size_t>(g)];
    for (auto v : mem)
      for (int k = 0; k < 3; ++k) ctr[static_cast<std::size_t>(k)] += positions.data()[v * 3 + k];
    for (int k = 0; k < 3; ++k) ctr[static_cast<std::size_t>(k)] /= static_cast<T>(mem.size());

    Tensor<T> rows = select_rows(f_view, mem);
    Tensor<T> pooled = reshape(max_over_set(rows), {1, d});
    if (token_weighted) pooled = scale_by(pooled, mean_all(select_rows(tokens, mem)));
    pooled_rows.push_back(pooled);
  }
  detail::require(!res.non_empty_indices.empty(), "group_pool: no non-empty groups");
  res.group_features = scatter_rows(concat_rows(pooled_rows), res.non_empty_indices, m_groups);
  return res;
}

// ---------------------------------------------------------------------------
// Token-sequence encoder shared by the view and group levels: a learned
// class token plus pre-norm transformer blocks, or a plain per-row linear
// map for the mini variant.
// ---------------------------------------------------------------------------

template <typename T>
class SequenceEncoder {
public:
  SequenceEncoder() = default;
  SequenceEncoder(std::int64_t d, std::int64_t layers, std::int64_t heads, std::int64_t expansion,
                  bool class_token, std::mt19937_64& rng)
      : has_cls_(class_token) {
    if (has_cls_) {
      cls_token_ = Tensor<T>::zeros({1, d});
      cls_pos_ = Tensor<T>::zeros({1, d});
      cls_token_.fill_normal(rng, T(0), T(0.02));
      cls_pos_.fill_normal(rng, T(0), T(0.02));
      cls_token_.set_requires_grad(true);
      cls_pos_.set_requires_grad(true);
      for (std::int64_t l = 0; l < layers; ++l) blocks_.emplace_back(d, heads, expansion, rng);
    } else {
      mlp_ = Linear<T>(d, d, rng);
    }
  }

  bool has_class_token() const { return has_cls_; }

  /// feats, pos_embed: [S x D]. Returns the encoded per-item features
  /// [S x D] and the class-token output [1 x D] (undefined without one).
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& feats, const Tensor<T>& pos_embed) const {
    Tensor<T> x = add(feats, pos_embed);
    if (!has_cls_) return {mlp_.forward(x), Tensor<T>{}};
    Tensor<T> seq = concat_rows({add(cls_token_, cls_pos_), x});
    for (const auto& b : blocks_) seq = b.forward(seq);
    return {slice_rows(seq, 1, seq.rows()), slice_rows(seq, 0, 1)};
  }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    if (has_cls_) {
      out.push_back({prefix + ".cls_token", cls_token_, false});
      out.push_back({prefix + ".cls_pos", cls_pos_, false});
      for (std::size_t l = 0; l < blocks_.size(); ++l)
        blocks_[l].collect(out, prefix + ".block" + std::to_string(l));
    } else {
      mlp_.collect(out, prefix + ".mlp");
    }
  }

  Linear<T>& mlp() { return mlp_; }

private:
  bool has_cls_ = false;
  Tensor<T> cls_token_, cls_pos_;
  std::vector<VitBlock<T>> blocks_;
  Linear<T> mlp_;
};

// ---------------------------------------------------------------------------
// CNN backbone (stem 7x7 + maxpool, three strided 3x3 stages, global
// average pool, final linear to D). The teacher inserts a second
// same-width 3x3 conv after each 3x3 stage.
// ---------------------------------------------------------------------------

template <typename T>
class Backbone {
public:
  Backbone() = default;
  Backbone(std::int64_t in_channels, std::int64_t d, bool depth_doubled, std::mt19937_64& rng) {
    const std::int64_t widths[4] = {64, 128, 256, 512};
    convs_.emplace_back(Conv2dLayer<T>(in_channels, widths[0], 7, 2, 3, rng), BatchNormLayer<T>(widths[0]),
                        "stem");
    for (int s = 0; s < 3; ++s) {
      convs_.emplace_back(Conv2dLayer<T>(widths[s], widths[s + 1], 3, 2, 1, rng),
                          BatchNormLayer<T>(widths[s + 1]), "stage" + std::to_string(s + 1));
      if (depth_doubled)
        convs_.emplace_back(Conv2dLayer<T>(widths[s + 1], widths[s + 1], 3, 1, 1, rng),
                            BatchNormLayer<T>(widths[s + 1]),
                            "stage" + std::to_string(s + 1) + "b");
    }
    if (d != widths[3]) fc_ = Linear<T>(widths[3], d, rng);
    out_dim_ = d;
  }

  /// [B x C x H x W] -> [B x D]
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> y = x;
    bool after_stem = false;
    for (auto& [conv, bn, name] : convs_) {
      y = relu(bn.forward2d(conv.forward(y), mode));
      if (!after_stem) {
        y = max_pool2d(y, 3, 2, 1);
        after_stem = true;
      }
    }
    y = global_avg_pool2d(y);
    if (fc_.weight.defined()) y = fc_.forward(y);
    return y;
  }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    for (const auto& [conv, bn, name] : convs_) {
      conv.collect(out, prefix + "." + name + ".conv");
      bn.collect(out, prefix + "." + name + ".bn");
    }
    if (fc_.weight.defined()) fc_.collect(out, prefix + ".fc");
  }

private:
  std::vector<std::tuple<Conv2dLayer<T>, BatchNormLayer<T>, std::string>> convs_;
  Linear<T> fc_;
  std::int64_t out_dim_ = 0;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct SampleInput {
  Tensor<T> images;     // [N x C x H x W]
  Tensor<T> positions;  // [N x 3]
  std::int64_t label = -1;
};

template <typename T>
struct ModelOutputs {
  Tensor<T> f_cnn;           // [B*N x D]
  Tensor<T> f_view;          // [B*N x D]
  Tensor<T> view_cls;        // [B x D] (undefined for mini / no view ViT)
  Tensor<T> tokens;          // [B*N x 1] (undefined when grouping disabled)
  Tensor<T> group_features;  // [B*M x D], masked
  Tensor<T> f_group;         // [B*M x D], masked
  Tensor<T> group_cls;       // [B x D] (undefined for mini / no group ViT)
  Tensor<T> f_global;        // [B x D]
  Tensor<T> f_retrieval;     // [B x retrieval_dim]
  Tensor<T> logits;          // [B x C]
  std::vector<GroupingResult<T>> grouping;  // per sample
};

/// Wall-clock seconds spent per pipeline stage, accumulated across calls.
struct StageTimes {
  double cnn = 0, view_encoder = 0, grouping = 0, group_encoder = 0, heads = 0;
  double total() const { return cnn + view_encoder + grouping + group_encoder + heads; }
};

template <typename T>
class Model {
public:
  Model() = default;

  Model(const ModelConfig& config, std::uint64_t init_seed) : cfg_(normalized(config)) {
    auto rng = RngPool(init_seed).stream("init");
    const std::int64_t d = cfg_.feature_dim;
    backbone_ = Backbone<T>(cfg_.input_channels, d, cfg_.variant == Variant::kTeacher, rng);
    if (cfg_.pe_mode == PeMode::kSpatial) {
      pe_view_ = PosEmbedMlp<T>(3, d, rng);
      pe_group_ = PosEmbedMlp<T>(3, d, rng);
    } else if (cfg_.pe_mode == PeMode::kLearnedIndex) {
      pe_view_table_ = Tensor<T>::zeros({cfg_.views, d});
      pe_view_table_.fill_normal(rng, T(0), T(0.02));
      pe_view_table_.set_requires_grad(true);
      pe_group_table_ = Tensor<T>::zeros({cfg_.groups, d});
      pe_group_table_.fill_normal(rng, T(0), T(0.02));
      pe_group_table_.set_requires_grad(true);
    }
    if (cfg_.use_view_vit)
      view_enc_ = SequenceEncoder<T>(d, cfg_.view_vit_layers, cfg_.heads, cfg_.expansion,
                                     cfg_.has_class_tokens(), rng);
    if (cfg_.use_grouping) grouping_fc_ = Linear<T>(d, 1, rng);
    if (cfg_.use_group_vit)
      group_enc_ = SequenceEncoder<T>(d, cfg_.group_vit_layers, cfg_.heads, cfg_.expansion,
                                      cfg_.has_class_tokens(), rng);
    const std::int64_t head_in = has_group_cls() ? 2 * d : d;
    descriptor_fc_ = Linear<T>(head_in, d, rng);
    cls_fc1_ = Linear<T>(d, d, rng);
    cls_bn1_ = BatchNormLayer<T>(d);
    cls_fc2_ = Linear<T>(d, cfg_.retrieval_dim(), rng);
    cls_bn2_ = BatchNormLayer<T>(cfg_.retrieval_dim());
    cls_fc3_ = Linear<T>(cfg_.retrieval_dim(), cfg_.classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_group_cls() const { return cfg_.has_class_tokens() && cfg_.use_group_vit; }
  bool has_view_cls() const { return cfg_.has_class_tokens() && cfg_.use_view_vit; }

  /// Position embeddings for one sample's camera positions [N x 3].
  Tensor<T> view_pos_embed(const Tensor<T>& positions) const {
    switch (cfg_.pe_mode) {
      case PeMode::kSpatial: return pe_view_.forward(positions);
      case PeMode::kLearnedIndex: return pe_view_table_;
      case PeMode::kNone: return Tensor<T>::zeros({positions.rows(), cfg_.feature_dim});
    }
    return {};
  }

  Tensor<T> group_pos_embed(const Tensor<T>& centroids,
                            const std::vector<std::int64_t>& slots) const {
    switch (cfg_.pe_mode) {
      case PeMode::kSpatial: return pe_group_.forward(centroids);
      case PeMode::kLearnedIndex: return select_rows(pe_group_table_, slots);
      case PeMode::kNone: return Tensor<T>::zeros({centroids.rows(), cfg_.feature_dim});
    }
    return {};
  }

  ModelOutputs<T> forward(const std::vector<SampleInput<T>>& batch, Mode mode,
                          std::mt19937_64* dropout_rng = nullptr, StageTimes* times = nullptr) {
    detail::require(!batch.empty(), "forward: empty batch");
    const std::int64_t b = static_cast<std::int64_t>(batch.size());
    const std::int64_t n = cfg_.views, d = cfg_.feature_dim;
    for (const auto& s : batch) {
      detail::require(s.images.rank() == 4 && s.images.dim(0) == n &&
                          s.images.dim(1) == cfg_.input_channels && s.images.dim(2) == cfg_.image_h &&
                          s.images.dim(3) == cfg_.image_w,
                      "forward: sample images " + shape_str(s.images.shape()) +
                          " do not match the model config");
      detail::require(s.positions.rank() == 2 && s.positions.rows() == n && s.positions.cols() == 3,
                      "forward: sample positions must be [N x 3]");
    }
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    auto lap = [&](double* slot) {
      if (!times) return;
      auto t1 = clock::now();
      *slot += std::chrono::duration<double>(t1 - t0).count();
      t0 = t1;
    };

    // Per-view CNN over the whole batch at once (batch-norm statistics span
    // all B*N views, matching shared-weight CNN training).
    std::vector<T> all_images;
    all_images.reserve(static_cast<std::size_t>(b * n * cfg_.input_channels * cfg_.image_h * cfg_.image_w));
    for (const auto& s : batch)
      all_images.insert(all_images.end(), s.images.data().begin(), s.images.data().end());
    Tensor<T> images =
        Tensor<T>::from({b * n, cfg_.input_channels, cfg_.image_h, cfg_.image_w}, std::move(all_images));
    ModelOutputs<T> out;
    out.f_cnn = backbone_.forward(images, mode);
    lap(times ? &times->cnn : nullptr);

    std::vector<Tensor<T>> f_view_rows, view_cls_rows, token_rows, fg_rows, fgroup_rows,
        group_cls_rows, fd_rows;
    for (std::int64_t i = 0; i < b; ++i) {
      Tensor<T> f_cnn_i = slice_rows(out.f_cnn, i * n, (i + 1) * n);

      // view-level encoder with camera-position embeddings
      Tensor<T> f_view_i;
      Tensor<T> view_cls_i;
      if (cfg_.use_view_vit) {
        Tensor<T> pe = view_pos_embed(batch[static_cast<std::size_t>(i)].positions);
        std::tie(f_view_i, view_cls_i) = view_enc_.forward(f_cnn_i, pe);
      } else {
        f_view_i = f_cnn_i;
      }
      f_view_rows.push_back(f_view_i);
      if (view_cls_i.defined()) view_cls_rows.push_back(view_cls_i);
      lap(times ? &times->view_encoder : nullptr);

      // grouping: tokens -> bins -> pooled features and centroids. With the
      // grouping module ablated, every view forms its own group.
      GroupingResult<T> grouping;
      std::int64_t m_eff = cfg_.groups;
      if (cfg_.use_grouping) {
        Tensor<T> t = clamp(sigmoid(grouping_fc_.forward(f_view_i)), static_cast<T>(kTokenClampLo),
                            static_cast<T>(kTokenClampHi));
        grouping = group_pool(f_view_i, t, group_assign(t.data(), cfg_.groups),
                              batch[static_cast<std::size_t>(i)].positions, cfg_.groups,
                              cfg_.token_weighted_pooling);
        token_rows.push_back(grouping.tokens);
      } else {
        m_eff = n;
        std::vector<std::int64_t> ident(static_cast<std::size_t>(n));
        std::iota(ident.begin(), ident.end(), 1);
        grouping = group_pool(f_view_i, Tensor<T>::zeros({n, 1}), ident,
                              batch[static_cast<std::size_t>(i)].positions, n, false);
      }
      fg_rows.push_back(grouping.group_features);
      lap(times ? &times->grouping : nullptr);

      // group-level encoder over the non-empty groups only
      Tensor<T> fg_nonempty = select_rows(grouping.group_features, grouping.non_empty_indices);
      std::vector<T> ctr_data;
      for (auto g : grouping.non_empty_indices)
        for (int k = 0; k < 3; ++k)
          ctr_data.push_back(grouping.centroids[static_cast<std::size_t>(g)][static_cast<std::size_t>(k)]);
      Tensor<T> centroids = Tensor<T>::from(
          {static_cast<std::int64_t>(grouping.non_empty_indices.size()), 3}, std::move(ctr_data));

      Tensor<T> f_group_nonempty;
      Tensor<T> group_cls_i;
      if (cfg_.use_group_vit) {
        Tensor<T> pe_g = group_pos_embed(centroids, grouping.non_empty_indices);
        std::tie(f_group_nonempty, group_cls_i) = group_enc_.forward(fg_nonempty, pe_g);
      } else {
        f_group_nonempty = fg_nonempty;
      }
      fgroup_rows.push_back(scatter_rows(f_group_nonempty, grouping.non_empty_indices, m_eff));
      if (group_cls_i.defined()) group_cls_rows.push_back(group_cls_i);
      lap(times ? &times->group_encoder : nullptr);

      // shape descriptor (Max pooled groups, concatenated with the group
      // class token when one exists)
      Tensor<T> pooled = reshape(max_over_set(f_group_nonempty), {1, d});
      Tensor<T> head_in = group_cls_i.defined() ? concat_cols({group_cls_i, pooled}) : pooled;
      fd_rows.push_back(descriptor_fc_.forward(head_in));
      lap(times ? &times->heads : nullptr);

      out.grouping.push_back(std::move(grouping));
    }

    out.f_view = concat_rows(f_view_rows);
    if (!view_cls_rows.empty()) out.view_cls = concat_rows(view_cls_rows);
    if (!token_rows.empty()) out.tokens = concat_rows(token_rows);
    out.group_features = concat_rows(fg_rows);
    out.f_group = concat_rows(fgroup_rows);
    if (!group_cls_rows.empty()) out.group_cls = concat_rows(group_cls_rows);
    out.f_global = concat_rows(fd_rows);

    // classifier head over the batch of descriptors
    t0 = clock::now();
    Tensor<T> h1 = relu(cls_bn1_.forward1d(cls_fc1_.forward(out.f_global), mode));
    if (mode == Mode::kTrain && cfg_.dropout_rate > 0) {
      detail::require(dropout_rng != nullptr, "forward: train mode needs a dropout rng");
      h1 = dropout(h1, static_cast<T>(cfg_.dropout_rate), mode, *dropout_rng);
    }
    out.f_retrieval = relu(cls_bn2_.forward1d(cls_fc2_.forward(h1), mode));
    out.logits = cls_fc3_.forward(out.f_retrieval);
    lap(times ? &times->heads : nullptr);
    return out;
  }

  ParamMap<T> params() const {
    ParamMap<T> out;
    backbone_.collect(out, "cnn");
    if (cfg_.pe_mode == PeMode::kSpatial) {
      pe_view_.collect(out, "pe_view");
      pe_group_.collect(out, "pe_group");
    } else if (cfg_.pe_mode == PeMode::kLearnedIndex) {
      out.push_back({"pe_view.table", pe_view_table_, false});
      out.push_back({"pe_group.table", pe_group_table_, false});
    }
    if (cfg_.use_view_vit) view_enc_.collect(out, "view_encoder");
    if (cfg_.use_grouping) grouping_fc_.collect(out, "grouping.fc");
    if (cfg_.use_group_vit) group_enc_.collect(out, "group_encoder");
    descriptor_fc_.collect(out, "descriptor.fc");
    cls_fc1_.collect(out, "classifier.fc1");
    cls_bn1_.collect(out, "classifier.bn1");
    cls_fc2_.collect(out, "classifier.fc2");
    cls_bn2_.collect(out, "classifier.bn2");
    cls_fc3_.collect(out, "classifier.fc3");
    return out;
  }

  std::vector<Tensor<T>> trainable_params() const {
    std::vector<Tensor<T>> out;
    for (const auto& p : params())
      if (!p.is_buffer) out.push_back(p.tensor);
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t total = 0;
    for (const auto& p : params())
      if (!p.is_buffer) total += p.tensor.numel();
    return total;
  }

  SequenceEncoder<T>& view_encoder() { return view_enc_; }
  SequenceEncoder<T>& group_encoder() { return group_enc_; }
  Linear<T>& grouping_fc() { return grouping_fc_; }
  Linear<T>& descriptor_fc() { return descriptor_fc_; }

private:
  ModelConfig cfg_;
  Backbone<T> backbone_;
  PosEmbedMlp<T> pe_view_, pe_group_;
  Tensor<T> pe_view_table_, pe_group_table_;
  SequenceEncoder<T> view_enc_, group_enc_;
  Linear<T> grouping_fc_;
  Linear<T> descriptor_fc_;
  Linear<T> cls_fc1_, cls_fc2_, cls_fc3_;
  BatchNormLayer<T> cls_bn1_, cls_bn2_;
};

template <typename T>
std::int64_t param_count(const ModelConfig& config) {
  return Model<T>(config, 0).param_count();
}

}  // namespace gmvit
