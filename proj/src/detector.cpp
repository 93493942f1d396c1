#include "hbrnet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hbrnet/bias.hpp"
#include "hbrnet/hunet.hpp"

namespace hbrnet::detector {

double bce_loss(double p, int y) { return focal_loss(p, y, 0.0, -1.0); }

double focal_loss(double p, int y, double gamma, double alpha) {
    if (gamma < 0.0) {
        throw std::invalid_argument("focal_loss: gamma must be nonnegative");
    }
    const double pt = y == 1 ? p : 1.0 - p;
    const double at = alpha < 0.0 ? 1.0 : (y == 1 ? alpha : 1.0 - alpha);
    const double mod = gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma);
    return at * mod * -std::log(pt);
}

template <typename T>
BasicBlock<T>::BasicBlock(std::size_t in, std::size_t out, std::size_t stride, RngStream& rng)
    : conv1(in, out, 3, stride, 1, false, rng),
      bn1(out),
      conv2(out, out, 3, 1, 1, false, rng),
      bn2(out) {
    if (stride != 1 || in != out) {
        shortcut.emplace(in, out, 1, stride, 0, false, rng);
        shortcut_bn.emplace(out);
    }
}

template <typename T>
Tensor<T> BasicBlock<T>::operator()(const Tensor<T>& x, Mode mode) {
    Tensor<T> y = ad::relu(bn1(conv1(x), mode));
    y = bn2(conv2(y), mode);
    const Tensor<T> skip = shortcut ? (*shortcut_bn)((*shortcut)(x), mode) : x;
    return ad::relu(ad::add(y, skip));
}

template <typename T>
void BasicBlock<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
    conv1.collect(out, prefix + "conv1.");
    bn1.collect(out, prefix + "bn1.");
    conv2.collect(out, prefix + "conv2.");
    bn2.collect(out, prefix + "bn2.");
    if (shortcut) {
        shortcut->collect(out, prefix + "shortcut.");
        shortcut_bn->collect(out, prefix + "shortcut_bn.");
    }
}

template <typename T>
void BasicBlock<T>::collect_buffers(nn::ParamList<T>& out, const std::string& prefix) const {
    bn1.export_buffers(out, prefix + "bn1.");
    bn2.export_buffers(out, prefix + "bn2.");
    if (shortcut_bn) shortcut_bn->export_buffers(out, prefix + "shortcut_bn.");
}

template <typename T>
std::vector<nn::BatchNorm2d<T>*> BasicBlock<T>::norms() {
    std::vector<nn::BatchNorm2d<T>*> out{&bn1, &bn2};
    if (shortcut_bn) out.push_back(&*shortcut_bn);
    return out;
}

template <typename T>
Model<T>::Model(std::size_t patch_size, const ResNetConfig& config, std::uint64_t seed)
    : lift_bn(kFeatureChannels), patch_size_(patch_size), config_(config) {
    if (config.blocks != std::array<std::size_t, 4>{2, 2, 2, 2}) {
        throw std::invalid_argument("detector: block counts must be [2,2,2,2]");
    }
    if (config.width == 0) {
        throw std::invalid_argument("detector: width must be positive");
    }
    if (patch_size == 0 || patch_size % 2 == 0) {
        throw std::invalid_argument("detector: patch size must be odd");
    }
    RngStream rng(seed);
    projection = nn::Conv2d<T>(kPlanes, kPlanes, 1, 1, 0, true, rng);
    lift = nn::Conv2d<T>(kPlanes, kFeatureChannels, 3, 1, 1, false, rng);
    const std::size_t strides[4] = {1, 2, 2, 2};
    std::size_t in = kFeatureChannels;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t out = config.width << s;
        for (std::size_t b = 0; b < config.blocks[s]; ++b) {
            blocks.emplace_back(in, out, b == 0 ? strides[s] : 1, rng);
            in = out;
        }
    }
    fc = nn::Linear<T>(in, 1, true, rng);
}

template <typename T>
Tensor<T> Model<T>::project(const Tensor<T>& x) {
    if (x.rank() != 5 || x.dim(1) != 3 || x.dim(2) != kChannels || x.dim(3) != patch_size_ ||
        x.dim(4) != patch_size_) {
        throw ad::ShapeError("upsample_project: expected N x 3 x 6 x " + std::to_string(patch_size_) +
                             " x " + std::to_string(patch_size_) + ", got " +
                             ad::shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0);
    // plane index = slice * 6 + channel
    Tensor<T> planes = ad::reshape(x, {n, kPlanes, patch_size_, patch_size_});
    std::vector<T> scale(kPlanes);
    for (std::size_t p = 0; p < kPlanes; ++p) {
        scale[p] = T(1) / static_cast<T>(bias::kChannelScale[p % kChannels]);
    }
    planes = ad::channel_affine_const(planes, scale, std::vector<T>(kPlanes, T(0)));
    return projection(ad::nearest_resize(planes, kProjSize, kProjSize));
}

template <typename T>
Tensor<T> Model<T>::upsample_project(const Tensor<T>& x, Mode mode) {
    Tensor<T> y = lift(ad::nearest_upsample2x(project(x)));
    return ad::relu(lift_bn(y, mode));
}

template <typename T>
Tensor<T> Model<T>::classify(const Tensor<T>& features, Mode mode) {
    Tensor<T> y = features;
    for (auto& b : blocks) y = b(y, mode);
    Tensor<T> z = fc(ad::global_avg_pool(y));
    return ad::reshape(z, {z.dim(0)});
}

template <typename T>
void Model<T>::zero_head() {
    for (auto& v : fc.weight.data()) v = T(0);
    if (fc.bias) {
        for (auto& v : fc.bias->data()) v = T(0);
    }
}

template <typename T>
nn::ParamList<T> Model<T>::parameters() const {
    nn::ParamList<T> out;
    projection.collect(out, "upsampler.projection.");
    lift.collect(out, "upsampler.lift.");
    lift_bn.collect(out, "upsampler.lift_bn.");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect(out, "resnet.block" + std::to_string(i) + ".");
    }
    fc.collect(out, "resnet.fc.");
    return out;
}

template <typename T>
nn::ParamList<T> Model<T>::state() const {
    nn::ParamList<T> out = parameters();
    lift_bn.export_buffers(out, "upsampler.lift_bn.");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect_buffers(out, "resnet.block" + std::to_string(i) + ".");
    }
    return out;
}

template <typename T>
void Model<T>::load_state(const std::vector<ckpt::NamedArray>& arrays) {
    ckpt::load_into(arrays, parameters());
    nn::ParamList<T> buffers;
    lift_bn.export_buffers(buffers, "upsampler.lift_bn.");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect_buffers(buffers, "resnet.block" + std::to_string(i) + ".");
    }
    ckpt::load_into(arrays, buffers);
    const auto& items = buffers.items();
    std::size_t k = 0;
    auto take = [&](nn::BatchNorm2d<T>& bn) {
        bn.import_buffers(items[k].tensor, items[k + 1].tensor);
        k += 2;
    };
    take(lift_bn);
    for (auto& b : blocks) {
        for (auto* bn : b.norms()) take(*bn);
    }
}

namespace {

Tensor<float> gather(const patch::PatchDataset& data, const std::vector<std::size_t>& idx,
                     std::size_t begin, std::size_t end) {
    const std::size_t pn = data.patch_numel();
    std::vector<float> buf((end - begin) * pn);
    for (std::size_t i = begin; i < end; ++i) {
        const auto src = data.patch(idx[i]);
        std::copy(src.begin(), src.end(), buf.begin() + static_cast<long>((i - begin) * pn));
    }
    return Tensor<float>(ad::Shape{end - begin, 3, kChannels, data.size, data.size}, std::move(buf));
}

}  // namespace

TrainResult train(Model<float>& model, const patch::PatchDataset& data, const TrainConfig& config,
                  const hunet::FrozenStage1* stage1, std::uint64_t expected_stage1_hash,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    if (data.count() < 2) {
        throw std::invalid_argument("train_stage2: need at least two patches");
    }
    if (data.size != model.patch_size()) {
        throw std::invalid_argument("train_stage2: dataset patch size " + std::to_string(data.size) +
                                    " does not match the model's " +
                                    std::to_string(model.patch_size()));
    }
    if (config.batch < 2) {
        throw std::invalid_argument("train_stage2: batch must be >= 2 for batchnorm");
    }
    auto check_stage1 = [&] {
        if (stage1 != nullptr) stage1->verify_against(expected_stage1_hash);
    };
    check_stage1();
    optim::AdamW<float> opt(model.parameters().tensors(), config.adamw);
    RngStream rng(derive_seed(config.seed, 11));
    TrainResult result;
    std::vector<std::size_t> idx(data.count());
    for (std::size_t e = 0; e < config.epochs; ++e) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const std::size_t take = config.patches_per_epoch == 0
                                     ? idx.size()
                                     : std::min(config.patches_per_epoch, idx.size());
        for (std::size_t i = 0; i < take; ++i) {
            std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        }
        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < take; start += config.batch) {
            std::size_t end = std::min(take, start + config.batch);
            // a trailing batch of one would break batchnorm statistics
            if (end - start < 2) break;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) labels.push_back(data.labels[idx[i]]);
            opt.zero_grad();
            Tensor<float> z = model.logits(gather(data, idx, start, end), Mode::train);
            Tensor<float> loss =
                config.loss.kind == LossConfig::Kind::bce
                    ? ad::bce_with_logits(z, labels)
                    : ad::focal_with_logits(z, labels, static_cast<float>(config.loss.gamma),
                                            static_cast<float>(config.loss.alpha));
            for (std::size_t i = 0; i < labels.size(); ++i) {
                correct += ((z[i] >= 0.0F) ? 1 : 0) == labels[i];
            }
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(labels.size());
            seen += labels.size();
            loss.backward();
            opt.step();
        }
        EpochLog row{e, loss_sum / static_cast<double>(seen),
                     static_cast<double>(correct) / static_cast<double>(seen)};
        result.log.push_back(row);
        check_stage1();
        if (on_epoch) on_epoch(row);
    }
    return result;
}

std::string log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,loss,train_acc\n";
    for (const auto& r : log) os << r.epoch << ',' << r.loss << ',' << r.train_acc << '\n';
    return os.str();
}

std::vector<float> predict(Model<float>& model, std::span<const float> patches, std::size_t count,
                           std::size_t batch) {
    const std::size_t s = model.patch_size();
    const std::size_t pn = 3 * kChannels * s * s;
    if (patches.size() != count * pn) {
        throw std::invalid_argument("predict: buffer does not hold the stated patch count");
    }
    ad::NoGradGuard guard;
    std::vector<float> out;
    out.reserve(count);
    for (std::size_t start = 0; start < count; start += batch) {
        const std::size_t n = std::min(batch, count - start);
        Tensor<float> x(ad::Shape{n, 3, kChannels, s, s},
                        std::vector<float>(patches.begin() + static_cast<long>(start * pn),
                                           patches.begin() + static_cast<long>((start + n) * pn)));
        const Tensor<float> z = model.logits(x, Mode::eval);
        for (std::size_t i = 0; i < n; ++i) {
            out.push_back(1.0F / (1.0F + std::exp(-z[i])));
        }
    }
    return out;
}

std::vector<std::uint8_t> save_model(const Model<float>& model) {
    return ckpt::serialize(ckpt::to_arrays(model.state()));
}

Model<float> load_model(const std::vector<std::uint8_t>& bytes, std::size_t patch_size,
                        const ResNetConfig& config) {
    Model<float> m(patch_size, config, 0);
    m.load_state(ckpt::deserialize(bytes));
    return m;
}

template struct BasicBlock<float>;
template struct BasicBlock<double>;
template class Model<float>;
template class Model<double>;

}  // namespace hbrnet::detector
