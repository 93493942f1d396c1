#include "hbrnet/hunet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hbrnet/patch.hpp"
#include "hbrnet/wht.hpp"

namespace hbrnet::hunet {

void HUNetConfig::validate() const {
    if (levels < 1) {
        throw std::invalid_argument("hunet: levels must be >= 1");
    }
    if (widths.size() != levels) {
        throw std::invalid_argument("hunet: expected " + std::to_string(levels) +
                                    " widths, got " + std::to_string(widths.size()));
    }
    for (auto w : widths) {
        if (w == 0) throw std::invalid_argument("hunet: widths must be positive");
    }
    if (!(coeff_dropout_rate >= 0.0 && coeff_dropout_rate < 1.0)) {
        throw std::invalid_argument("hunet: coeff_dropout_rate must lie in [0, 1)");
    }
    if (!wht::is_power_of_two(pad_target) || (pad_target >> (levels - 1)) == 0) {
        throw std::invalid_argument("hunet: pad_target must be a power of two >= 2^(levels-1)");
    }
    for (float c : log_floor) {
        if (!(c > 0.0F)) throw std::invalid_argument("hunet: log floors must be positive");
    }
}

template <typename T>
void Block<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
    out.add(prefix + "thresholds", thresholds);
    mix.collect(out, prefix + "mix.");
}

template <typename T>
nn::ParamList<T> Params<T>::parameters() const {
    nn::ParamList<T> out;
    for (std::size_t l = 0; l < encoder.size(); ++l) {
        encoder[l].collect(out, "enc" + std::to_string(l) + ".");
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
        decoder[l].collect(out, "dec" + std::to_string(l) + ".");
    }
    head.collect(out, "head.");
    return out;
}

template <typename T>
void Params<T>::clamp_thresholds() {
    for (auto* blocks : {&encoder, &decoder}) {
        for (auto& b : *blocks) {
            for (auto& t : b.thresholds.data()) t = std::max(t, T(0));
        }
    }
}

namespace {

template <typename T>
Tensor<T> copy_of(const Tensor<T>& t) {
    Tensor<T> c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
}

template <typename T>
nn::Conv2d<T> copy_conv(const nn::Conv2d<T>& c) {
    nn::Conv2d<T> out;
    out.weight = copy_of(c.weight);
    if (c.bias) out.bias = copy_of(*c.bias);
    out.stride = c.stride;
    out.padding = c.padding;
    return out;
}

}  // namespace

template <typename T>
Params<T> Params<T>::clone() const {
    Params out;
    out.config = config;
    for (const auto& b : encoder) out.encoder.push_back({copy_of(b.thresholds), copy_conv(b.mix)});
    for (const auto& b : decoder) out.decoder.push_back({copy_of(b.thresholds), copy_conv(b.mix)});
    out.head = copy_conv(head);
    return out;
}

namespace {

std::size_t level_size(const HUNetConfig& c, std::size_t l) { return c.pad_target >> l; }

std::size_t decoder_in(const HUNetConfig& c, std::size_t l) {
    return c.widths[l + 1] + c.widths[l];
}

template <typename T>
Params<T> make_shape(const HUNetConfig& config, RngStream& rng) {
    config.validate();
    Params<T> p;
    p.config = config;
    for (std::size_t l = 0; l < config.levels; ++l) {
        const std::size_t in = l == 0 ? kChannels : config.widths[l - 1];
        const std::size_t s = level_size(config, l);
        p.encoder.push_back({Tensor<T>(ad::Shape{in, s, s}, T(0), true),
                             nn::Conv2d<T>(in, config.widths[l], 1, 1, 0, true, rng)});
    }
    for (std::size_t l = 0; l + 1 < config.levels; ++l) {
        const std::size_t in = decoder_in(config, l);
        const std::size_t s = level_size(config, l);
        p.decoder.push_back({Tensor<T>(ad::Shape{in, s, s}, T(0), true),
                             nn::Conv2d<T>(in, config.widths[l], 1, 1, 0, true, rng)});
    }
    p.head = nn::Conv2d<T>(config.widths[0] + kChannels, kChannels, 1, 1, 0, true, rng);
    return p;
}

template <typename T>
void set_selection(nn::Conv2d<T>& conv, std::size_t in_offset) {
    auto w = conv.weight.data();
    std::fill(w.begin(), w.end(), T(0));
    const std::size_t out = conv.weight.dim(0);
    const std::size_t in = conv.weight.dim(1);
    for (std::size_t o = 0; o < out && in_offset + o < in; ++o) {
        w[o * in + in_offset + o] = T(1);
    }
    if (conv.bias) {
        auto b = conv.bias->data();
        std::fill(b.begin(), b.end(), T(0));
    }
}

}  // namespace

template <typename T>
Params<T> init_params(const HUNetConfig& config, std::uint64_t seed) {
    RngStream rng(seed);
    Params<T> p = make_shape<T>(config, rng);
    set_selection(p.head, config.widths[0]);
    return p;
}

template <typename T>
Params<T> identity_params(const HUNetConfig& config) {
    for (auto w : config.widths) {
        if (w < kChannels) {
            throw std::invalid_argument("identity_params: every width must be >= 6");
        }
    }
    RngStream rng(0);
    Params<T> p = make_shape<T>(config, rng);
    for (auto& b : p.encoder) set_selection(b.mix, 0);
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        set_selection(p.decoder[l].mix, config.widths[l + 1]);
    }
    set_selection(p.head, 0);
    return p;
}

template <typename T>
Tensor<T> coeff_dropout(const Tensor<T>& coeffs, double rate, RngStream& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw std::invalid_argument("coeff_dropout: rate must lie in [0, 1)");
    }
    if (coeffs.rank() < 2) {
        throw std::invalid_argument("coeff_dropout: needs at least two dims");
    }
    if (rate == 0.0) {
        return coeffs;
    }
    const std::size_t plane = coeffs.dim(coeffs.rank() - 2) * coeffs.dim(coeffs.rank() - 1);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> factor(coeffs.numel());
    for (std::size_t i = 0; i < factor.size(); ++i) {
        if (i % plane == 0) {
            factor[i] = T(1);
        } else {
            factor[i] = rng.bernoulli(rate) ? T(0) : keep_scale;
        }
    }
    ad::Buffer<T> out(coeffs.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = coeffs[i] * factor[i];
    return ad::make_result<T>(coeffs.shape(), std::move(out), {coeffs.node_ptr()},
                              [factor = std::move(factor)](ad::Node<T>& self) {
                                  auto& p = self.parents[0];
                                  for (std::size_t i = 0; i < factor.size(); ++i) {
                                      p->grad[i] += self.grad[i] * factor[i];
                                  }
                              });
}

namespace {

template <typename T>
Tensor<T> run_block(const Block<T>& b, const Tensor<T>& x, const HUNetConfig& config, Mode mode,
                    RngStream* rng) {
    // inputs are already power-of-two sized, so the per-block pad/crop is a no-op
    Tensor<T> c = ad::wht2d(x);
    if (mode == Mode::train && config.coeff_dropout_rate > 0.0) {
        c = coeff_dropout(c, config.coeff_dropout_rate, *rng);
    }
    c = ad::softshrink(c, b.thresholds);
    c = ad::wht2d(c);
    return ad::relu(b.mix(c));
}

template <typename T>
Tensor<T> log_map(const Tensor<T>& x, const HUNetConfig& config) {
    const std::size_t n = x.dim(0);
    const std::size_t plane = x.dim(2) * x.dim(3);
    ad::Buffer<T> u(x.numel());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < kChannels; ++c) {
            const T floor = static_cast<T>(config.log_floor[c]);
            const std::size_t off = (b * kChannels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                u[off + i] = std::log(std::max(x[off + i], floor) / floor);
            }
        }
    }
    return Tensor<T>(x.shape(), std::move(u));
}

}  // namespace

template <typename T>
Tensor<T> forward(const Params<T>& params, const Tensor<T>& x, Mode mode, RngStream* rng) {
    const auto& config = params.config;
    if (x.rank() != 4 || x.dim(1) != kChannels) {
        throw ad::ShapeError("hunet forward: expected N x 6 x H x W, got " + ad::shape_str(x.shape()));
    }
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    if (h > config.pad_target || w > config.pad_target) {
        throw ad::ShapeError("hunet forward: slice " + std::to_string(h) + "x" + std::to_string(w) +
                             " exceeds pad target " + std::to_string(config.pad_target));
    }
    if (mode == Mode::train && config.coeff_dropout_rate > 0.0 && rng == nullptr) {
        throw std::invalid_argument("hunet forward: train mode needs an rng");
    }
    Tensor<T> u = ad::pad_reflect(log_map(x, config), config.pad_target, config.pad_target);

    std::vector<Tensor<T>> feats;
    feats.push_back(run_block(params.encoder[0], u, config, mode, rng));
    for (std::size_t l = 1; l < config.levels; ++l) {
        feats.push_back(run_block(params.encoder[l], ad::avg_pool2x2(feats.back()), config, mode, rng));
    }
    Tensor<T> cur = feats.back();
    for (std::size_t l = config.levels - 1; l-- > 0;) {
        cur = run_block(params.decoder[l], ad::concat_channels(ad::nearest_upsample2x(cur), feats[l]),
                        config, mode, rng);
    }
    Tensor<T> logv = params.head(ad::concat_channels(cur, u));
    logv = ad::crop(logv, h, w);
    std::vector<T> floors(config.log_floor.begin(), config.log_floor.end());
    return ad::channel_affine_const(ad::exp(logv), floors, std::vector<T>(kChannels, T(0)));
}

std::vector<Stage1Sample> make_samples(const BiomarkerVolume& observed, const MaskVolume& prostate,
                                       const bias::ReferenceConfig& ref, ReferenceMode mode,
                                       std::size_t dilation) {
    if (!(observed.dims == prostate.dims)) {
        throw std::invalid_argument("make_samples: mask dims do not match the volume");
    }
    const Dims3 d = observed.dims;
    const std::size_t n = d.voxels();
    BiomarkerVolume target(d);
    if (mode == ReferenceMode::per_channel) {
        for (std::size_t c = 0; c < kChannels; ++c) {
            target.set_channel(c, bias::reference_correct(observed.channel(c), prostate, ref).corrected);
        }
    } else {
        Volume3 logmean(d);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t c = 0; c < kChannels; ++c) {
                acc += std::log(std::max<double>(observed.values[c * n + i], ref.log_floor));
            }
            logmean.values[i] = static_cast<float>(std::exp(acc / kChannels));
        }
        const auto field = bias::reference_correct(logmean, prostate, ref).field;
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                target.values[c * n + i] =
                    std::max(observed.values[c * n + i], static_cast<float>(ref.log_floor)) /
                    field.values[i];
            }
        }
    }
    const MaskVolume loss_mask = patch::dilate_mask(prostate, dilation);
    std::vector<Stage1Sample> out;
    const std::size_t plane = d.plane();
    for (std::size_t z = 0; z < d.z; ++z) {
        const auto* pm = prostate.values.data() + z * plane;
        if (std::none_of(pm, pm + plane, [](auto v) { return v != 0; })) continue;
        Stage1Sample s;
        s.rows = d.h;
        s.cols = d.w;
        s.input = observed.slice(z);
        s.target = target.slice(z);
        s.mask.assign(loss_mask.values.begin() + static_cast<long>(z * plane),
                      loss_mask.values.begin() + static_cast<long>((z + 1) * plane));
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
Tensor<T> masked_loss(const Tensor<T>& pred, const std::vector<const Stage1Sample*>& batch) {
    if (pred.rank() != 4 || pred.dim(0) != batch.size() || pred.dim(1) != kChannels) {
        throw ad::ShapeError("masked_loss: prediction " + ad::shape_str(pred.shape()) +
                             " does not match a batch of " + std::to_string(batch.size()));
    }
    const std::size_t plane = pred.dim(2) * pred.dim(3);
    std::vector<T> target(pred.numel());
    std::vector<T> weight(pred.numel());
    std::size_t count = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Stage1Sample& s = *batch[b];
        if (s.rows * s.cols != plane) {
            throw ad::ShapeError("masked_loss: sample size does not match the prediction");
        }
        for (std::size_t i = 0; i < plane; ++i) count += s.mask[i] != 0;
        for (std::size_t c = 0; c < kChannels; ++c) {
            const T inv = T(1) / (static_cast<T>(bias::kChannelScale[c]) *
                                  static_cast<T>(bias::kChannelScale[c]));
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t k = (b * kChannels + c) * plane + i;
                target[k] = static_cast<T>(s.target[c * plane + i]);
                weight[k] = s.mask[i] ? inv : T(0);
            }
        }
    }
    return ad::weighted_sse(pred, target, weight, static_cast<T>(std::max<std::size_t>(count, 1)));
}

namespace {

Tensor<float> stack_inputs(const std::vector<const Stage1Sample*>& batch) {
    const std::size_t h = batch.front()->rows;
    const std::size_t w = batch.front()->cols;
    std::vector<float> data;
    data.reserve(batch.size() * kChannels * h * w);
    for (const auto* s : batch) {
        if (s->rows != h || s->cols != w) {
            throw ad::ShapeError("stage-1 batch mixes slice sizes");
        }
        data.insert(data.end(), s->input.begin(), s->input.end());
    }
    return Tensor<float>(ad::Shape{batch.size(), kChannels, h, w}, std::move(data));
}

}  // namespace

TrainResult train(const std::vector<Stage1Sample>& samples, const HUNetConfig& config,
                  const TrainConfig& tc, const std::function<void(std::size_t, double)>& on_epoch) {
    if (samples.empty()) {
        throw std::invalid_argument("train_stage1: empty training split");
    }
    if (tc.batch == 0) {
        throw std::invalid_argument("train_stage1: batch must be positive");
    }
    TrainResult result{init_params<float>(config, derive_seed(tc.seed, 1)), {}};
    auto params = result.params.parameters();
    optim::AdamW<float> opt(params.tensors(), tc.adamw);
    RngStream order_rng(derive_seed(tc.seed, 2));
    RngStream drop_rng(derive_seed(tc.seed, 3));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t e = 0; e < tc.epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.below(i)]);
        }
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch) {
            std::vector<const Stage1Sample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + tc.batch); ++i) {
                batch.push_back(&samples[order[i]]);
            }
            opt.zero_grad();
            Tensor<float> pred = forward(result.params, stack_inputs(batch), Mode::train, &drop_rng);
            Tensor<float> loss = masked_loss(pred, batch);
            loss_sum += loss.item();
            ++batches;
            loss.backward();
            opt.step();
            result.params.clamp_thresholds();
        }
        const double mean_loss = loss_sum / static_cast<double>(batches);
        result.epoch_loss.push_back(mean_loss);
        if (on_epoch) on_epoch(e, mean_loss);
    }
    return result;
}

std::string loss_log_csv(const std::vector<double>& epoch_loss) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,mean_loss\n";
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
        os << e << ',' << epoch_loss[e] << '\n';
    }
    return os.str();
}

std::vector<std::uint8_t> save_params(const Params<float>& params) {
    return ckpt::serialize(ckpt::to_arrays(params.parameters()));
}

Params<float> load_params(const std::vector<std::uint8_t>& bytes, const HUNetConfig& config) {
    RngStream rng(0);
    Params<float> p = make_shape<float>(config, rng);
    ckpt::load_into(ckpt::deserialize(bytes), p.parameters());
    return p;
}

FrozenStage1::FrozenStage1(const Params<float>& params) : params_(params.clone()) {
    const auto plist = params_.parameters();
    for (const auto& item : plist.items()) {
        Tensor<float>(item.tensor).set_requires_grad(false);
    }
    bytes_ = save_params(params_);
    hash_ = ckpt::fnv1a64(bytes_);
}

Tensor<float> FrozenStage1::forward(const Tensor<float>& x) const {
    if (x.requires_grad()) {
        throw DecouplingError("frozen Stage-1 does not propagate gradients");
    }
    ad::NoGradGuard guard;
    return hunet::forward(params_, x, Mode::eval);
}

BiomarkerVolume FrozenStage1::correct(const BiomarkerVolume& observed) const {
    const Dims3 d = observed.dims;
    const std::size_t plane = d.plane();
    BiomarkerVolume out(d);
    constexpr std::size_t kBatch = 8;
    for (std::size_t z0 = 0; z0 < d.z; z0 += kBatch) {
        const std::size_t nz = std::min(kBatch, d.z - z0);
        std::vector<float> data;
        data.reserve(nz * kChannels * plane);
        for (std::size_t z = z0; z < z0 + nz; ++z) {
            const auto s = observed.slice(z);
            data.insert(data.end(), s.begin(), s.end());
        }
        const auto y = forward(Tensor<float>(ad::Shape{nz, kChannels, d.h, d.w}, std::move(data)));
        for (std::size_t z = z0; z < z0 + nz; ++z) {
            const auto* src = y.data().data() + (z - z0) * kChannels * plane;
            out.set_slice(z, std::vector<float>(src, src + kChannels * plane));
        }
    }
    clamp_to_physical(out);
    return out;
}

void FrozenStage1::verify() const {
    if (ckpt::fnv1a64(save_params(params_)) != hash_) {
        throw DecouplingError("Stage-1 parameters changed after freezing");
    }
}

void FrozenStage1::verify_against(std::uint64_t expected) const {
    verify();
    if (hash_ != expected) {
        throw DecouplingError("Stage-1 hash " + ckpt::hex64(hash_) + " does not match expected " +
                              ckpt::hex64(expected));
    }
}

template struct Block<float>;
template struct Block<double>;
template struct Params<float>;
template struct Params<double>;
template Params<float> init_params(const HUNetConfig&, std::uint64_t);
template Params<double> init_params(const HUNetConfig&, std::uint64_t);
template Params<float> identity_params(const HUNetConfig&);
template Params<double> identity_params(const HUNetConfig&);
template Tensor<float> coeff_dropout(const Tensor<float>&, double, RngStream&);
template Tensor<double> coeff_dropout(const Tensor<double>&, double, RngStream&);
template Tensor<float> forward(const Params<float>&, const Tensor<float>&, Mode, RngStream*);
template Tensor<double> forward(const Params<double>&, const Tensor<double>&, Mode, RngStream*);
template Tensor<float> masked_loss(const Tensor<float>&, const std::vector<const Stage1Sample*>&);
template Tensor<double> masked_loss(const Tensor<double>&, const std::vector<const Stage1Sample*>&);

}  // namespace hbrnet::hunet
