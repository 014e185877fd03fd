#include "motionforge/denoiser.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "motionforge/error.hpp"
#include "motionforge/rng.hpp"

namespace motionforge::diff {

PreparedCondition prepare_condition(const Conditioning& cond, int frames) {
    cond.validate();
    require(frames >= 1, ErrorKind::invalid_input, "prepare_condition: need at least one frame");
    require(cond.reference_frame.channels() == 1, ErrorKind::shape, "the toy denoiser expects single-channel frames");
    PreparedCondition p;
    p.frames = frames;
    p.width = cond.reference_frame.width();
    p.height = cond.reference_frame.height();
    p.global_strength = cond.global_strength;
    const std::size_t plane = static_cast<std::size_t>(p.width) * p.height;
    p.reference.resize(plane);
    p.transported.resize(plane * frames);
    p.flow_u.resize(plane * frames);
    p.flow_v.resize(plane * frames);
    for (std::size_t i = 0; i < plane; ++i) p.reference[i] = 2.0 * cond.reference_frame.values()[i] - 1.0;

    field::Frame img = cond.reference_frame;
    field::FlowField g = cond.motion_field;
    for (int k = 0; k < frames; ++k) {
        const std::size_t off = plane * k;
        for (std::size_t i = 0; i < plane; ++i) {
            p.transported[off + i] = 2.0 * img.values()[i] - 1.0;
            p.flow_u[off + i] = g.data()[i].u;
            p.flow_v[off + i] = g.data()[i].v;
        }
        if (k + 1 < frames) {
            img = field::advect_frame(img, g);
            g = field::advect_field(g, g);
        }
    }
    return p;
}

std::size_t TrainableModel::parameter_count() const {
    std::size_t n = 0;
    for (const ParamSpec& p : layout()) n += nn::element_count(p.shape);
    return n;
}

std::vector<double> TrainableModel::initial_parameters(std::uint64_t seed) const {
    std::vector<double> out;
    out.reserve(parameter_count());
    CounterRng rng = CounterRng(seed).fork(0x1a17);
    for (const ParamSpec& p : layout()) {
        const std::size_t n = nn::element_count(p.shape);
        const double scale = std::sqrt(1.0 / p.fan_in);
        for (std::size_t i = 0; i < n; ++i) {
            // Rounded through float so a checkpoint of the initial state reloads exactly.
            out.push_back(p.zero_init ? 0.0 : static_cast<double>(static_cast<float>(rng.normal() * scale)));
        }
    }
    return out;
}

namespace {

enum ToyParam : std::size_t {
    conv0_w, conv0_b, conv1_w, conv1_b, down1_w, down1_b, down2_w, down2_b,
    menc0_w, menc0_b, menc1_w, menc1_b,
    att_q, att_k, att_v, att_o_w, att_o_b, temp_w, temp_b,
    mid_w, mid_b, up1_w, up1_b, up2_w, up2_b, out_w, out_b,
    emb_w, emb_b, e1_w, e1_b, e2_w, e2_b, e3_w, e3_b, e4_w, e4_b, e5_w, e5_b,
    toy_param_count
};

ParamSpec conv_spec(std::string name, int out, int in, int k) {
    return {std::move(name), {out, in, k, k}, in * k * k, false};
}

ParamSpec bias_spec(std::string name, int n) { return {std::move(name), {n}, 1, true}; }

ParamSpec matrix_spec(std::string name, int out, int in) { return {std::move(name), {out, in}, in, false}; }

std::uint64_t layout_hash(std::string_view tag, const std::vector<ParamSpec>& layout) {
    std::ostringstream s;
    s << tag;
    for (const ParamSpec& p : layout) {
        s << '|' << p.name;
        for (int d : p.shape) s << ',' << d;
    }
    return fnv1a64(s.str());
}

void check_batch(std::span<const ModelInput> batch) {
    require(!batch.empty(), ErrorKind::invalid_input, "model forward: empty batch");
    const PreparedCondition* c0 = batch.front().cond;
    require(c0 != nullptr, ErrorKind::invalid_input, "model forward: missing condition");
    for (const ModelInput& in : batch) {
        require(in.cond != nullptr && in.z_t != nullptr, ErrorKind::invalid_input, "model forward: missing input");
        require(in.cond->frames == c0->frames && in.cond->width == c0->width && in.cond->height == c0->height,
                ErrorKind::shape, "model forward: batch elements differ in shape");
        require(in.z_t->frames() == in.cond->frames && in.z_t->channels() == 1 &&
                    in.z_t->height() == in.cond->height && in.z_t->width() == in.cond->width,
                ErrorKind::shape, "model forward: latent does not match the conditioning shape");
    }
}

}  // namespace

ToyDenoiser::ToyDenoiser(ToyConfig config) : config_(config) {
    const int c0 = config_.base_channels;
    const int c1 = config_.deep_channels;
    const int e = config_.embedding_dim;
    const int eh = config_.embedding_hidden;
    require(config_.width % 4 == 0 && config_.height % 4 == 0 && config_.width >= 4 && config_.height >= 4,
            ErrorKind::invalid_input, "toy denoiser: frame sides must be positive multiples of 4");
    require(c0 > 0 && c1 > 0 && e > 0 && e % 2 == 0 && eh > 0 && config_.attention_dim > 0, ErrorKind::invalid_input,
            "toy denoiser: invalid channel configuration");
    layout_.resize(toy_param_count);
    layout_[conv0_w] = conv_spec("conv0.w", c0, 6, 3);
    layout_[conv0_b] = bias_spec("conv0.b", c0);
    layout_[conv1_w] = conv_spec("conv1.w", c0, c0, 3);
    layout_[conv1_b] = bias_spec("conv1.b", c0);
    layout_[down1_w] = conv_spec("down1.w", c1, c0, 3);
    layout_[down1_b] = bias_spec("down1.b", c1);
    layout_[down2_w] = conv_spec("down2.w", c1, c1, 3);
    layout_[down2_b] = bias_spec("down2.b", c1);
    layout_[menc0_w] = conv_spec("motion0.w", c0, 2, 3);
    layout_[menc0_b] = bias_spec("motion0.b", c0);
    layout_[menc1_w] = conv_spec("motion1.w", c1, c0, 3);
    layout_[menc1_b] = bias_spec("motion1.b", c1);
    layout_[att_q] = matrix_spec("attn.q", config_.attention_dim, c1);
    layout_[att_k] = matrix_spec("attn.k", config_.attention_dim, c1);
    layout_[att_v] = matrix_spec("attn.v", c1, c1);
    layout_[att_o_w] = conv_spec("attn.out.w", c1, c1, 1);
    layout_[att_o_b] = bias_spec("attn.out.b", c1);
    layout_[temp_w] = conv_spec("temporal.w", c1, c1, 1);
    layout_[temp_b] = bias_spec("temporal.b", c1);
    layout_[mid_w] = conv_spec("mid.w", c1, c1, 3);
    layout_[mid_b] = bias_spec("mid.b", c1);
    layout_[up1_w] = conv_spec("up1.w", c1, 2 * c1, 3);
    layout_[up1_b] = bias_spec("up1.b", c1);
    layout_[up2_w] = conv_spec("up2.w", c0, c1 + c0, 3);
    layout_[up2_b] = bias_spec("up2.b", c0);
    layout_[out_w] = conv_spec("out.w", 1, c0, 3);
    layout_[out_b] = bias_spec("out.b", 1);
    layout_[emb_w] = matrix_spec("emb.w", eh, 2 * e);
    layout_[emb_b] = bias_spec("emb.b", eh);
    const int block_channels[] = {c0, c1, c1, c1, c0};
    for (int i = 0; i < 5; ++i) {
        layout_[e1_w + 2 * i] = matrix_spec("emb" + std::to_string(i + 1) + ".w", block_channels[i], eh);
        layout_[e1_b + 2 * i] = bias_spec("emb" + std::to_string(i + 1) + ".b", block_channels[i]);
    }
    std::ostringstream tag;
    tag << "toy-denoiser/1 " << config_.width << 'x' << config_.height << " s" << config_.strength_scale << " f"
        << config_.flow_scale;
    hash_ = layout_hash(tag.str(), layout_);
}

nn::Var ToyDenoiser::forward(nn::Tape& tape, std::span<const nn::Var> p, std::span<const ModelInput> batch) const {
    check_batch(batch);
    require(p.size() == layout_.size(), ErrorKind::shape, "toy denoiser: parameter count mismatch");
    const int B = static_cast<int>(batch.size());
    const int L = batch.front().cond->frames;
    const int H = batch.front().cond->height;
    const int W = batch.front().cond->width;
    require(H == config_.height && W == config_.width, ErrorKind::shape, "toy denoiser: frame size differs from config");
    const int N = B * L;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const int e = config_.embedding_dim;

    nn::Tensor x({N, 6, H, W});
    nn::Tensor zt({N, 1, H, W});
    nn::Tensor base({N, 1, H, W});
    nn::Tensor flow({N, 2, H, W});
    nn::Tensor emb({B, 2 * e});
    std::vector<double> ca(N), cb(N);
    for (int i = 0; i < B; ++i) {
        const ModelInput& in = batch[i];
        const PreparedCondition& c = *in.cond;
        require(in.alpha_bar > 0.0 && in.alpha_bar < 1.0, ErrorKind::invalid_input, "toy denoiser: alpha_bar out of range");
        for (int k = 0; k < L; ++k) {
            const int n = i * L + k;
            const std::size_t src = plane * k;
            double* xp = &x.data[static_cast<std::size_t>(n) * 6 * plane];
            const auto zf = in.z_t->frame_data(k);
            const double frame_pos = L > 1 ? static_cast<double>(k) / (L - 1) : 0.0;
            for (std::size_t j = 0; j < plane; ++j) {
                xp[j] = zf[j];
                xp[plane + j] = c.transported[src + j];
                xp[2 * plane + j] = c.reference[j];
                xp[3 * plane + j] = c.flow_u[src + j] / config_.flow_scale;
                xp[4 * plane + j] = c.flow_v[src + j] / config_.flow_scale;
                xp[5 * plane + j] = frame_pos;
                zt.data[n * plane + j] = zf[j];
                base.data[n * plane + j] = c.transported[src + j];
                flow.data[(2 * n) * plane + j] = c.flow_u[src + j] / config_.flow_scale;
                flow.data[(2 * n + 1) * plane + j] = c.flow_v[src + j] / config_.flow_scale;
            }
            // (1 - abar) times the eps implied by x0 = transported reference; the damping keeps
            // the residual target bounded at small t.
            ca[n] = std::sqrt(1.0 - in.alpha_bar);
            cb[n] = std::sqrt(in.alpha_bar) * std::sqrt(1.0 - in.alpha_bar);
        }
        const auto te = timestep_embedding(in.t, e);
        const auto se = strength_embedding(c.global_strength * config_.strength_scale, e);
        std::copy(te.begin(), te.end(), emb.data.begin() + static_cast<std::ptrdiff_t>(i) * 2 * e);
        std::copy(se.begin(), se.end(), emb.data.begin() + static_cast<std::ptrdiff_t>(i) * 2 * e + e);
    }

    using namespace nn;
    const Var emb_h = silu(tape, linear(tape, tape.constant(std::move(emb)), p[emb_w], p[emb_b]));
    auto block_bias = [&](std::size_t w) { return repeat_rows(tape, linear(tape, emb_h, p[w], p[w + 1]), L); };

    const Var in = tape.constant(std::move(x));
    const Var h0 = silu(tape, conv2d(tape, in, p[conv0_w], p[conv0_b], 1, 1));
    const Var h1 = silu(tape, add_channel_bias(tape, conv2d(tape, h0, p[conv1_w], p[conv1_b], 1, 1), block_bias(e1_w)));
    const Var h2 =
        silu(tape, add_channel_bias(tape, conv2d(tape, h1, p[down1_w], p[down1_b], 2, 1), block_bias(e2_w)));
    Var h3 = silu(tape, conv2d(tape, h2, p[down2_w], p[down2_b], 2, 1));

    const Var m0 = silu(tape, conv2d(tape, tape.constant(std::move(flow)), p[menc0_w], p[menc0_b], 2, 1));
    const Var zm = conv2d(tape, m0, p[menc1_w], p[menc1_b], 2, 1);
    const Var att = motion_attention(tape, h3, zm, p[att_q], p[att_k], p[att_v], L);
    h3 = add(tape, h3, conv2d(tape, att, p[att_o_w], p[att_o_b], 1, 0));
    h3 = add(tape, h3, conv2d(tape, group_mean(tape, h3, L), p[temp_w], p[temp_b], 1, 0));

    const Var h4 = silu(tape, add_channel_bias(tape, conv2d(tape, h3, p[mid_w], p[mid_b], 1, 1), block_bias(e3_w)));
    const Var u1 = concat_channels(tape, upsample2(tape, h4), h2);
    const Var h5 = silu(tape, add_channel_bias(tape, conv2d(tape, u1, p[up1_w], p[up1_b], 1, 1), block_bias(e4_w)));
    const Var u2 = concat_channels(tape, upsample2(tape, h5), h1);
    const Var h6 = silu(tape, add_channel_bias(tape, conv2d(tape, u2, p[up2_w], p[up2_b], 1, 1), block_bias(e5_w)));
    const Var residual = conv2d(tape, h6, p[out_w], p[out_b], 1, 1);
    const Var prior = affine_combine(tape, tape.constant(std::move(base)), zt, ca, cb);
    return add(tape, residual, prior);
}

MicroDenoiser::MicroDenoiser() {
    layout_ = {ParamSpec{"micro.w", {1, 4, 1, 1}, 4, false}, ParamSpec{"micro.b", {1}, 1, false}};
}

std::uint64_t MicroDenoiser::arch_hash() const { return layout_hash("micro-denoiser/1", layout_); }

nn::Var MicroDenoiser::forward(nn::Tape& tape, std::span<const nn::Var> p, std::span<const ModelInput> batch) const {
    check_batch(batch);
    require(p.size() == 2, ErrorKind::shape, "micro denoiser: parameter count mismatch");
    const int L = batch.front().cond->frames;
    const int H = batch.front().cond->height;
    const int W = batch.front().cond->width;
    const int N = static_cast<int>(batch.size()) * L;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    nn::Tensor x({N, 4, H, W});
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const PreparedCondition& c = *batch[i].cond;
        for (int k = 0; k < L; ++k) {
            double* xp = &x.data[(i * L + k) * 4 * plane];
            const auto zf = batch[i].z_t->frame_data(k);
            for (std::size_t j = 0; j < plane; ++j) {
                xp[j] = zf[j];
                xp[plane + j] = c.transported[plane * k + j];
                xp[2 * plane + j] = c.flow_u[plane * k + j];
                xp[3 * plane + j] = c.flow_v[plane * k + j];
            }
        }
    }
    return nn::conv2d(tape, tape.constant(std::move(x)), p[0], p[1], 1, 0);
}

DenoiserWeights initial_weights(const TrainableModel& model, std::uint64_t seed) {
    DenoiserWeights w;
    w.seed = seed;
    w.arch_hash = model.arch_hash();
    const std::vector<double> p = model.initial_parameters(seed);
    w.params.assign(p.begin(), p.end());
    return w;
}

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'F', 'C', 'K'};
constexpr std::size_t kCheckpointHeader = 4 + 4 + 8 + 8 + 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[offset + i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const DenoiserWeights& w) {
    std::vector<std::uint8_t> out;
    out.reserve(kCheckpointHeader + 4 * w.params.size());
    out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_le<std::uint32_t>(out, w.version);
    put_le<std::uint64_t>(out, w.seed);
    put_le<std::uint64_t>(out, w.arch_hash);
    put_le<std::uint32_t>(out, w.trained ? 1u : 0u);
    put_le<std::uint64_t>(out, w.params.size());
    for (float f : w.params) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

DenoiserWeights decode_checkpoint(std::span<const std::uint8_t> bytes) {
    require(bytes.size() >= kCheckpointHeader, ErrorKind::format, "checkpoint: truncated header");
    require(std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin()), ErrorKind::format,
            "checkpoint: bad magic");
    DenoiserWeights w;
    w.version = get_le<std::uint32_t>(bytes, 4);
    require(w.version == DenoiserWeights::kVersion, ErrorKind::state,
            "checkpoint: unsupported version " + std::to_string(w.version));
    w.seed = get_le<std::uint64_t>(bytes, 8);
    w.arch_hash = get_le<std::uint64_t>(bytes, 16);
    const std::uint32_t flags = get_le<std::uint32_t>(bytes, 24);
    w.trained = (flags & 1u) != 0;
    const std::uint64_t count = get_le<std::uint64_t>(bytes, 28);
    require(count == (bytes.size() - kCheckpointHeader) / 4 && (bytes.size() - kCheckpointHeader) % 4 == 0,
            ErrorKind::format, "checkpoint: payload length does not match the parameter count");
    w.params.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        w.params[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, kCheckpointHeader + 4 * i));
    }
    return w;
}

void save_checkpoint(const DenoiserWeights& w, const std::string& path) {
    const auto bytes = encode_checkpoint(w);
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path);
}

DenoiserWeights load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_arch_hash) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open checkpoint " + path);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    DenoiserWeights w = decode_checkpoint(bytes);
    if (expected_arch_hash) {
        require(w.arch_hash == *expected_arch_hash, ErrorKind::state,
                "checkpoint architecture hash mismatch (file was written for a different model)");
    }
    return w;
}

std::uint64_t checkpoint_digest(const DenoiserWeights& w) {
    const auto bytes = encode_checkpoint(w);
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

ModelPredictor::ModelPredictor(const TrainableModel& model, DenoiserWeights weights, NoiseSchedule schedule)
    : model_(model), weights_(std::move(weights)), schedule_(std::move(schedule)) {
    require(weights_.arch_hash == model_.arch_hash(), ErrorKind::state,
            "weights were produced for a different architecture");
    require(weights_.params.size() == model_.parameter_count(), ErrorKind::state,
            "weights do not match the model's parameter count");
    params_.assign(weights_.params.begin(), weights_.params.end());
}

namespace {

std::vector<nn::Var> bind_parameters(nn::Tape& tape, const TrainableModel& model, std::span<const double> params,
                                     bool trainable) {
    require(params.size() == model.parameter_count(), ErrorKind::shape, "parameter vector has the wrong length");
    std::vector<nn::Var> vars;
    std::size_t off = 0;
    for (const ParamSpec& spec : model.layout()) {
        const std::size_t n = nn::element_count(spec.shape);
        nn::Tensor t(spec.shape, std::vector<double>(params.begin() + off, params.begin() + off + n));
        vars.push_back(trainable ? tape.parameter(std::move(t)) : tape.constant(std::move(t)));
        off += n;
    }
    return vars;
}

}  // namespace

VideoTensor ModelPredictor::predict(const VideoTensor& z_t, int t, const Conditioning& cond) const {
    require(t >= 1 && t <= schedule_.steps(), ErrorKind::bounds, "predict: timestep out of range");
    const PreparedCondition pc = prepare_condition(cond, z_t.frames());
    nn::Tape tape(false);
    const auto vars = bind_parameters(tape, model_, params_, false);
    const ModelInput in{&z_t, t, schedule_.alpha_bar(t), &pc};
    const nn::Var out = model_.forward(tape, vars, std::span<const ModelInput>(&in, 1));
    return VideoTensor(z_t.frames(), z_t.channels(), z_t.height(), z_t.width(), tape.value(out).data);
}

namespace {

struct BatchGraph {
    std::vector<VideoTensor> noisy;
    std::vector<ModelInput> inputs;
    nn::Tensor target;
};

BatchGraph build_batch(std::span<const LossSample> batch, const NoiseSchedule& s) {
    require(!batch.empty(), ErrorKind::invalid_input, "loss: empty batch");
    BatchGraph g;
    g.noisy.reserve(batch.size());
    std::vector<double> target;
    for (const LossSample& item : batch) {
        require(item.cond != nullptr, ErrorKind::invalid_input, "loss: sample without conditioning");
        g.noisy.push_back(forward_noise(item.z0, item.t, item.eps, s));
        target.insert(target.end(), item.eps.data().begin(), item.eps.data().end());
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        g.inputs.push_back({&g.noisy[i], batch[i].t, s.alpha_bar(batch[i].t), batch[i].cond});
    }
    const VideoTensor& z = batch.front().z0;
    g.target = nn::Tensor({static_cast<int>(batch.size()) * z.frames(), z.channels(), z.height(), z.width()},
                          std::move(target));
    return g;
}

double batch_loss(const TrainableModel& model, std::span<const double> params, std::span<const LossSample> batch,
                  const NoiseSchedule& s) {
    BatchGraph g = build_batch(batch, s);
    nn::Tape tape(false);
    const auto vars = bind_parameters(tape, model, params, false);
    const nn::Var out = model.forward(tape, vars, g.inputs);
    const nn::Var loss = nn::squared_error(tape, out, g.target, static_cast<double>(batch.size()));
    return tape.value(loss).data[0];
}

}  // namespace

LossGradient loss_and_gradient(const TrainableModel& model, std::span<const double> params,
                               std::span<const LossSample> batch, const NoiseSchedule& s) {
    BatchGraph g = build_batch(batch, s);
    nn::Tape tape(true);
    const auto vars = bind_parameters(tape, model, params, true);
    const nn::Var out = model.forward(tape, vars, g.inputs);
    const nn::Var loss = nn::squared_error(tape, out, g.target, static_cast<double>(batch.size()));
    tape.backward(loss);
    LossGradient r;
    r.loss = tape.value(loss).data[0];
    r.gradient.reserve(params.size());
    for (std::size_t i = 0; i < vars.size(); ++i) {
        const auto& gv = tape.grad(vars[i]);
        const std::size_t n = tape.value(vars[i]).size();
        if (gv.empty()) {
            r.gradient.insert(r.gradient.end(), n, 0.0);
        } else {
            r.gradient.insert(r.gradient.end(), gv.begin(), gv.end());
        }
    }
    return r;
}

namespace {

// Conditioning variants a clip can be trained with.
struct ClipVariants {
    VideoTensor z0;
    PreparedCondition truth;
    std::optional<PreparedCondition> arrows;
    PreparedCondition dropped;
};

struct SampleDraw {
    std::size_t clip;
    int t;
    int variant;  // 0 truth, 1 arrows, 2 dropped
};

// Timesteps dealt from shuffled passes over 1..T, so every run of T consecutive draws covers
// each level once.
class TimestepDeck {
public:
    TimestepDeck(int steps, CounterRng rng) : steps_(steps), rng_(rng) {}

    int next() {
        if (pos_ == deck_.size()) {
            deck_.resize(static_cast<std::size_t>(steps_));
            for (int i = 0; i < steps_; ++i) deck_[i] = i + 1;
            for (std::size_t i = deck_.size(); i > 1; --i) std::swap(deck_[i - 1], deck_[rng_.below(i)]);
            pos_ = 0;
        }
        return deck_[pos_++];
    }

private:
    int steps_;
    CounterRng rng_;
    std::vector<int> deck_;
    std::size_t pos_ = 0;
};

const PreparedCondition* pick(const ClipVariants& c, int variant) {
    if (variant == 2) return &c.dropped;
    if (variant == 1 && c.arrows) return &*c.arrows;
    return &c.truth;
}

}  // namespace

TrainResult train(const TrainableModel& model, std::span<const TrainingClip> dataset, const NoiseSchedule& s,
                  const TrainConfig& config) {
    require(!dataset.empty(), ErrorKind::invalid_input, "train: empty dataset");
    require(config.steps >= 0 && config.batch_clips >= 1 && config.eval_samples >= 0, ErrorKind::invalid_input,
            "train: steps, batch size and eval size must be nonnegative (batch >= 1)");
    require(config.learning_rate >= 0.0 && std::isfinite(config.learning_rate), ErrorKind::invalid_input,
            "train: learning rate must be >= 0");
    require(config.arrow_probability >= 0.0 && config.dropout_probability >= 0.0 &&
                config.arrow_probability + config.dropout_probability <= 1.0,
            ErrorKind::invalid_input, "train: conditioning probabilities must sum to at most 1");

    const VideoTensor& v0 = dataset.front().video;
    std::vector<ClipVariants> clips;
    clips.reserve(dataset.size());
    for (const TrainingClip& clip : dataset) {
        require(clip.video.same_shape(v0) && clip.video.channels() == 1, ErrorKind::shape,
                "train: clips must share one single-channel shape");
        Conditioning cond{clip.flow, {}, clip.strength, clip.video.frame(0)};
        ClipVariants cv;
        cv.z0 = to_model_space(clip.video);
        cv.truth = prepare_condition(cond, v0.frames());
        if (clip.sparse_hint) {
            std::vector<field::Pixel> sources;
            for (int y = 0; y < clip.sparse_hint->height(); ++y) {
                for (int x = 0; x < clip.sparse_hint->width(); ++x) {
                    const auto& f = clip.sparse_hint->at(x, y);
                    if (f.u != 0.0f || f.v != 0.0f) sources.push_back({x, y});
                }
            }
            Conditioning ac = cond;
            ac.motion_field = sparse::refine(sparse::densify(*clip.sparse_hint, config.densify), config.refine, sources);
            cv.arrows = prepare_condition(ac, v0.frames());
        }
        Conditioning dc = cond;
        dc.motion_field = field::FlowField(clip.flow.width(), clip.flow.height());
        cv.dropped = prepare_condition(dc, v0.frames());
        clips.push_back(std::move(cv));
    }

    CounterRng root(config.seed);
    auto draw = [&](CounterRng& rng) {
        SampleDraw d;
        d.clip = static_cast<std::size_t>(rng.below(clips.size()));
        d.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps())));
        const double u = rng.uniform();
        d.variant = u < config.dropout_probability                               ? 2
                    : u < config.dropout_probability + config.arrow_probability ? 1
                                                                                : 0;
        return d;
    };
    auto make_sample = [&](const SampleDraw& d, CounterRng& rng) {
        const ClipVariants& c = clips[d.clip];
        return LossSample{c.z0, d.t, normal_video(v0.frames(), 1, v0.height(), v0.width(), rng), pick(c, d.variant)};
    };

    // Fixed held-out draws for the before/after comparison.
    std::vector<LossSample> eval_set;
    {
        CounterRng er = root.fork(0xe7a1);
        for (int i = 0; i < config.eval_samples; ++i) eval_set.push_back(make_sample(draw(er), er));
    }
    auto eval_loss = [&](std::span<const double> params) {
        if (eval_set.empty()) return 0.0;
        double total = 0.0;
        const std::size_t chunk = 8;
        for (std::size_t i = 0; i < eval_set.size(); i += chunk) {
            const std::size_t n = std::min(chunk, eval_set.size() - i);
            total += batch_loss(model, params, std::span<const LossSample>(eval_set).subspan(i, n), s) * n;
        }
        return total / eval_set.size();
    };

    TrainResult result;
    std::vector<double> params = model.initial_parameters(config.seed);
    std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);
    result.initial_eval_loss = eval_loss(params);

    CounterRng rng = root.fork(1);
    TimestepDeck deck(s.steps(), root.fork(2));
    double b1t = 1.0, b2t = 1.0;
    for (int step = 1; step <= config.steps; ++step) {
        std::vector<LossSample> batch;
        for (int b = 0; b < config.batch_clips; ++b) {
            SampleDraw d = draw(rng);
            if (config.stratified_timesteps) d.t = deck.next();
            batch.push_back(make_sample(d, rng));
        }
        LossGradient lg = loss_and_gradient(model, params, batch, s);
        if (!std::isfinite(lg.loss)) {
            fail(ErrorKind::state, "training diverged at step " + std::to_string(step) + ": loss is not finite");
        }
        result.loss_curve.emplace_back(step, lg.loss);

        double norm2 = 0.0;
        for (double g : lg.gradient) norm2 += g * g;
        const double norm = std::sqrt(norm2);
        const double clip = norm > config.grad_clip && config.grad_clip > 0.0 ? config.grad_clip / norm : 1.0;
        b1t *= config.beta1;
        b2t *= config.beta2;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = lg.gradient[i] * clip;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            const double mh = m[i] / (1.0 - b1t);
            const double vh = v[i] / (1.0 - b2t);
            params[i] -= config.learning_rate * mh / (std::sqrt(vh) + 1e-8);
        }
        if (config.progress) config.progress(step, lg.loss);
    }

    // The stored weights are float32; evaluate what will actually be saved.
    result.weights.seed = config.seed;
    result.weights.arch_hash = model.arch_hash();
    result.weights.trained = config.steps > 0;
    result.weights.params.assign(params.begin(), params.end());
    const std::vector<double> stored(result.weights.params.begin(), result.weights.params.end());
    result.final_eval_loss = eval_loss(stored);
    return result;
}

std::string loss_curve_csv(const std::vector<std::pair<int, double>>& curve) {
    std::ostringstream out;
    out.precision(10);
    out << "step,loss\n";
    for (const auto& [step, loss] : curve) out << step << ',' << loss << '\n';
    return out.str();
}

}  // namespace motionforge::diff
