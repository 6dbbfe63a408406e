#pragma once

// Binary parameter checkpoints ("MWM1") and their JSON sidecar.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mwm/autodiff.hpp"
#include "mwm/denoiser.hpp"
#include "mwm/diffusion.hpp"
#include "mwm/error.hpp"

namespace mwm::ckpt {

inline constexpr char kMagic[4] = {'M', 'W', 'M', '1'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {
template <typename T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}
template <typename T>
T get_le(std::istream& is) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        int c = is.get();
        if (c == EOF) throw RuntimeError("checkpoint: truncated file");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return static_cast<T>(v);
}
}  // namespace detail

template <typename R>
void write_params(std::ostream& os, const ad::ParamStore<R>& params) {
    os.write(kMagic, 4);
    detail::put_le<std::uint32_t>(os, kVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        if (p.name.size() > 0xFFFF) throw ContractError("checkpoint: parameter name too long");
        detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.group));
        const auto& shape = p.value.shape();
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
        for (auto d : shape) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        for (R v : p.value.values()) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
}

template <typename R>
ad::ParamStore<R> read_params(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw RuntimeError("checkpoint: bad magic bytes");
    auto version = detail::get_le<std::uint32_t>(is);
    if (version != kVersion) throw RuntimeError("checkpoint: unsupported version " + std::to_string(version));
    auto count = detail::get_le<std::uint32_t>(is);
    ad::ParamStore<R> store;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto len = detail::get_le<std::uint16_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw RuntimeError("checkpoint: truncated file");
        auto g = detail::get_le<std::uint8_t>(is);
        if (g > 1) throw RuntimeError("checkpoint: bad group tag for " + name);
        auto rank = detail::get_le<std::uint8_t>(is);
        if (rank < 1 || rank > 2) throw RuntimeError("checkpoint: bad rank for " + name);
        std::vector<std::size_t> shape;
        for (int d = 0; d < rank; ++d) shape.push_back(detail::get_le<std::uint32_t>(is));
        Array<R> a(shape);
        for (auto& v : a.values()) v = static_cast<R>(std::bit_cast<float>(detail::get_le<std::uint32_t>(is)));
        store.add(name, static_cast<ad::Group>(g), std::move(a));
    }
    return store;
}

inline nlohmann::ordered_json model_config_json(const model::ModelConfig& c) {
    return {{"obs_dim", c.obs_dim},       {"hidden", c.hidden},     {"blocks", c.blocks},
            {"memory", c.memory},         {"embed", c.embed},       {"mlp_ratio", c.mlp_ratio},
            {"v_scale", c.v_scale},       {"w_scale", c.w_scale},   {"action_freq_scale", c.action_freq_scale},
            {"seed", c.seed}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
    model::ModelConfig c;
    c.obs_dim = j.at("obs_dim");
    c.hidden = j.at("hidden");
    c.blocks = j.at("blocks");
    c.memory = j.at("memory");
    c.embed = j.at("embed");
    c.mlp_ratio = j.at("mlp_ratio");
    c.v_scale = j.at("v_scale");
    c.w_scale = j.at("w_scale");
    c.action_freq_scale = j.at("action_freq_scale");
    c.seed = j.at("seed");
    return c;
}

struct ScheduleInfo {
    diffusion::ScheduleKind kind = diffusion::ScheduleKind::linear_beta;
    int T = 1000;
};

// Writes `path` and `path`.json.
template <typename R>
void save(const std::filesystem::path& path, const model::Denoiser<R>& m, const ScheduleInfo& sched) {
    {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw RuntimeError("checkpoint: cannot write " + path.string());
        write_params(os, m.params());
    }
    nlohmann::ordered_json side;
    side["format"] = "MWM1";
    side["model"] = model_config_json(m.config());
    side["diffusion"] = {{"kind", diffusion::to_string(sched.kind)}, {"T", sched.T}};
    std::ofstream js(path.string() + ".json");
    js << side.dump(2) << '\n';
}

template <typename R>
struct Loaded {
    model::Denoiser<R> model;
    ScheduleInfo sched;
};

template <typename R>
Loaded<R> load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw RuntimeError("checkpoint: cannot open " + path.string());
    std::ifstream js(path.string() + ".json");
    if (!js) throw RuntimeError("checkpoint: missing sidecar " + path.string() + ".json");
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(js);
    } catch (const std::exception& e) {
        throw RuntimeError(std::string("checkpoint: bad sidecar: ") + e.what());
    }
    auto cfg = model_config_from_json(side.at("model"));
    ScheduleInfo si{diffusion::parse_schedule_kind(side.at("diffusion").at("kind")), side.at("diffusion").at("T")};
    return {model::Denoiser<R>(cfg, read_params<R>(is)), si};
}

// FNV-1a over names, groups, shapes and raw bits of the selected groups.
template <typename R>
std::uint64_t params_hash(const ad::ParamStore<R>& params, ad::GroupMask mask = ad::GroupMask::all()) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
        auto b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& p : params) {
        if (!mask.contains(p.group)) continue;
        mix(p.name.data(), p.name.size());
        for (auto d : p.value.shape()) mix(&d, sizeof d);
        mix(p.value.values().data(), p.value.size() * sizeof(R));
    }
    return h;
}

}  // namespace mwm::ckpt
