#include "fpdn/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "fpdn/errors.hpp"

namespace fpdn {

void ModelSpec::validate() const {
    if (base_channels < 1) throw ConfigError("model spec: base_channels must be >= 1");
    if (channel_cap < base_channels) {
        throw ConfigError("model spec: channel_cap must be >= base_channels");
    }
    if (encoder_blocks != 4 || decoder_blocks != 3) {
        throw ConfigError("model spec: the architecture is fixed at 4 encoder / 3 decoder blocks");
    }
    for (int d : dilations) {
        if (d < 1) throw ConfigError("model spec: dilations must be positive");
    }
    if (dropout_rate < 0.0f || dropout_rate >= 1.0f) {
        throw ConfigError("model spec: dropout_rate must lie in [0,1)");
    }
    if (input_channels != 1 || output_channels != 1) {
        throw ConfigError("model spec: single-channel input and output only");
    }
}

int ModelSpec::encoder_channels(int i) const {
    std::int64_t c = base_channels;
    for (int k = 0; k < i; ++k) c = std::min<std::int64_t>(c * 2, channel_cap);
    return static_cast<int>(c);
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw Error("model params: no parameter named '" + name + "'");
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw Error("model params: no parameter named '" + name + "'");
    return it->second;
}

bool ModelParams::learnable(const std::string& name) {
    return !name.ends_with(".running_mean") && !name.ends_with(".running_var");
}

namespace {

enum class InitKind { kHeWeight, kZero, kOne, kPReluSlope };

struct ParamDecl {
    std::string name;
    std::vector<int> shape;
    InitKind init;
    int fan_in = 0;  // for kHeWeight
};

void declare_conv(std::vector<ParamDecl>& out, const std::string& prefix, int in_ch, int out_ch,
                  int k, bool transposed) {
    const int fan_in = in_ch * k * k;
    if (transposed) {
        out.push_back({prefix + ".weight", {in_ch, out_ch, k, k}, InitKind::kHeWeight, fan_in});
    } else {
        out.push_back({prefix + ".weight", {out_ch, in_ch, k, k}, InitKind::kHeWeight, fan_in});
    }
    out.push_back({prefix + ".bias", {out_ch}, InitKind::kZero, 0});
}

void declare_bn_prelu(std::vector<ParamDecl>& out, const std::string& prefix, int idx, int ch) {
    const std::string bn = prefix + ".bn" + std::to_string(idx);
    out.push_back({bn + ".gamma", {ch}, InitKind::kOne, 0});
    out.push_back({bn + ".beta", {ch}, InitKind::kZero, 0});
    out.push_back({bn + ".running_mean", {ch}, InitKind::kZero, 0});
    out.push_back({bn + ".running_var", {ch}, InitKind::kOne, 0});
    out.push_back({prefix + ".prelu" + std::to_string(idx) + ".alpha", {ch},
                   InitKind::kPReluSlope, 0});
}

// Parameter declarations in architectural order; the rng is consumed in this
// order by build_model, so the order is part of the determinism contract.
std::vector<ParamDecl> declare_params(const ModelSpec& spec) {
    spec.validate();
    std::vector<ParamDecl> decls;
    int in_ch = spec.input_channels;
    for (int b = 0; b < spec.encoder_blocks; ++b) {
        const std::string prefix = "enc" + std::to_string(b + 1);
        const int ch = spec.encoder_channels(b);
        int conv_in = in_ch;
        for (int i = 0; i < 3; ++i) {
            declare_conv(decls, prefix + ".conv" + std::to_string(i + 1), conv_in, ch, 3, false);
            declare_bn_prelu(decls, prefix, i + 1, ch);
            conv_in = ch;
        }
        in_ch = ch;
    }
    int below = spec.encoder_channels(spec.encoder_blocks - 1);
    for (int b = 0; b < spec.decoder_blocks; ++b) {
        const std::string prefix = "dec" + std::to_string(b + 1);
        const int target = spec.encoder_channels(spec.encoder_blocks - 2 - b);
        declare_conv(decls, prefix + ".up", below, target, 2, true);
        declare_conv(decls, prefix + ".proj", 2 * target, target, 1, false);
        for (int i = 0; i < 2; ++i) {
            declare_conv(decls, prefix + ".conv" + std::to_string(i + 1), target, target, 3,
                         false);
            declare_bn_prelu(decls, prefix, i + 1, target);
        }
        below = target;
    }
    declare_conv(decls, "out", below, spec.output_channels, 1, false);
    return decls;
}

constexpr float kPReluInitialSlope = 0.25f;

}  // namespace

ModelParams build_model(const ModelSpec& spec, Rng& rng) {
    ModelParams params;
    for (const ParamDecl& decl : declare_params(spec)) {
        Tensor t(decl.shape);
        switch (decl.init) {
            case InitKind::kHeWeight: {
                const double std_dev = std::sqrt(2.0 / decl.fan_in);
                float* p = t.data();
                const std::int64_t n = t.numel();
                for (std::int64_t i = 0; i < n; ++i) {
                    p[i] = static_cast<float>(rng.normal(0.0, std_dev));
                }
                break;
            }
            case InitKind::kZero:
                break;
            case InitKind::kOne:
                t.fill(1.0f);
                break;
            case InitKind::kPReluSlope:
                t.fill(kPReluInitialSlope);
                break;
        }
        params.values.emplace(decl.name, std::move(t));
    }
    return params;
}

std::map<std::string, std::vector<int>> expected_param_shapes(const ModelSpec& spec) {
    std::map<std::string, std::vector<int>> shapes;
    for (const ParamDecl& decl : declare_params(spec)) {
        shapes.emplace(decl.name, decl.shape);
    }
    return shapes;
}

std::vector<ParamEntry> parameter_iter(ModelParams& params, const GradTape* tape) {
    std::vector<ParamEntry> entries;
    entries.reserve(params.values.size());
    for (auto& [name, tensor] : params.values) {
        if (!ModelParams::learnable(name)) continue;
        const Tensor* grad = tape ? tape->gradient(tensor.id()) : nullptr;
        entries.push_back(ParamEntry{&name, &tensor, grad});
    }
    return entries;
}

namespace {

// conv -> batch_norm -> prelu -> dropout, the unit both block kinds repeat.
Tensor conv_bn_act(const ModelSpec& spec, ModelParams& params, const std::string& prefix, int idx,
                   int dilation, const Tensor& input, Mode mode, Rng& rng, GradTape* tape) {
    const std::string conv = prefix + ".conv" + std::to_string(idx);
    const std::string bn = prefix + ".bn" + std::to_string(idx);
    const Tensor& w = params.at(conv + ".weight");
    const ConvSpec cs = ConvSpec::same3x3(w.dim(1), w.dim(0), dilation);
    Tensor x = ops::conv2d(input, w, params.at(conv + ".bias"), cs, tape);
    x = ops::batch_norm(x, params.at(bn + ".gamma"), params.at(bn + ".beta"),
                        params.at(bn + ".running_mean"), params.at(bn + ".running_var"),
                        params.bn_batches_tracked, mode, tape);
    x = ops::prelu(x, params.at(prefix + ".prelu" + std::to_string(idx) + ".alpha"), tape);
    return ops::dropout(x, spec.dropout_rate, rng, mode, tape);
}

}  // namespace

Tensor encoder_block(const ModelSpec& spec, ModelParams& params, const std::string& prefix,
                     const Tensor& input, Mode mode, Rng* rng, GradTape* tape) {
    Rng dummy(0);
    if (mode == Mode::kTrain && spec.dropout_rate > 0.0f && rng == nullptr) {
        throw NumericError("encoder_block: train mode with dropout needs an rng");
    }
    Rng& r = rng ? *rng : dummy;
    // The tape links ops by tensor id, so each stage consumes the previous
    // tensor directly; copying here would break the gradient chain.
    Tensor x = conv_bn_act(spec, params, prefix, 1, spec.dilations[0], input, mode, r, tape);
    for (int i = 1; i < 3; ++i) {
        x = conv_bn_act(spec, params, prefix, i + 1, spec.dilations[static_cast<size_t>(i)], x,
                        mode, r, tape);
    }
    return x;
}

Tensor decoder_block(const ModelSpec& spec, ModelParams& params, const std::string& prefix,
                     const Tensor& below, const Tensor& skip, Mode mode, Rng* rng, GradTape* tape) {
    Rng dummy(0);
    if (mode == Mode::kTrain && spec.dropout_rate > 0.0f && rng == nullptr) {
        throw NumericError("decoder_block: train mode with dropout needs an rng");
    }
    Rng& r = rng ? *rng : dummy;

    const Tensor& up_w = params.at(prefix + ".up.weight");
    const ConvSpec up_spec = ConvSpec::upsample2x(up_w.dim(0), up_w.dim(1));
    Tensor up = ops::conv2d_transposed(below, up_w, params.at(prefix + ".up.bias"), up_spec, tape);

    Tensor cat = ops::concat_channels(skip, up, tape);

    const Tensor& proj_w = params.at(prefix + ".proj.weight");
    const ConvSpec proj_spec = ConvSpec::proj1x1(proj_w.dim(1), proj_w.dim(0));
    Tensor proj = ops::conv2d(cat, proj_w, params.at(prefix + ".proj.bias"), proj_spec, tape);

    Tensor x = conv_bn_act(spec, params, prefix, 1, 1, proj, mode, r, tape);
    x = conv_bn_act(spec, params, prefix, 2, 1, x, mode, r, tape);
    return ops::add(x, proj, tape);
}

Tensor forward(const ModelSpec& spec, ModelParams& params, const Tensor& input, Mode mode,
               Rng* rng, GradTape* tape) {
    spec.validate();
    if (input.rank() != 4) {
        throw ShapeError("forward: input must be [N,C,H,W], got rank " +
                         std::to_string(input.rank()));
    }
    if (input.dim(1) != spec.input_channels) {
        throw ShapeError("forward: expected " + std::to_string(spec.input_channels) +
                         " input channel(s), got " + std::to_string(input.dim(1)));
    }
    const int div = spec.spatial_divisor();
    if (input.dim(2) % div != 0 || input.dim(3) % div != 0) {
        throw ShapeError("forward: H and W must be divisible by " + std::to_string(div) +
                         ", got " + std::to_string(input.dim(2)) + "x" +
                         std::to_string(input.dim(3)));
    }

    std::vector<Tensor> skips;
    Tensor x = encoder_block(spec, params, "enc1", input, mode, rng, tape);
    for (int b = 1; b < spec.encoder_blocks; ++b) {
        // Move keeps the tensor id, so the pooled path and the skip path both
        // stay attached to the same tape node.
        skips.push_back(std::move(x));
        x = ops::max_pool2(skips.back(), tape).output;
        x = encoder_block(spec, params, "enc" + std::to_string(b + 1), x, mode, rng, tape);
    }
    for (int b = 0; b < spec.decoder_blocks; ++b) {
        const Tensor& skip = skips[static_cast<size_t>(spec.decoder_blocks - 1 - b)];
        x = decoder_block(spec, params, "dec" + std::to_string(b + 1), x, skip, mode, rng, tape);
    }
    const Tensor& out_w = params.at("out.weight");
    x = ops::conv2d(x, out_w, params.at("out.bias"),
                    ConvSpec::proj1x1(out_w.dim(1), out_w.dim(0)), tape);
    return ops::sigmoid(x, tape);
}

}  // namespace fpdn
