#include "inflight/pattern.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "inflight/errors.hpp"

namespace inflight {

namespace {

void check_dims(int h, int w, int channels) {
    if (h < 1 || w < 1 || channels < 1)
        throw AttackError("pattern dimensions must be positive, got " + std::to_string(h) + "x" + std::to_string(w) +
                          "x" + std::to_string(channels));
}

}  // namespace

BackdoorPattern make_chessboard(int h, int w, int channels, double amplitude) {
    check_dims(h, w, channels);
    if (amplitude < -1.0 || amplitude > 1.0)
        throw AttackError("chessboard amplitude must lie in [-1,1], got " + std::to_string(amplitude));
    AdditivePattern p;
    p.delta = RealGrid::zeros(h, w, channels);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if ((i + j) % 2 == 0)
                for (int c = 0; c < channels; ++c) p.delta.at(i, j, c) = amplitude;
    return p;
}

BackdoorPattern make_single_pixel(int h, int w, int channels, int row, int col) {
    check_dims(h, w, channels);
    if (row < 0 || row >= h || col < 0 || col >= w)
        throw AttackError("single-pixel location (" + std::to_string(row) + "," + std::to_string(col) +
                          ") outside " + std::to_string(h) + "x" + std::to_string(w) + " image");
    PixelPattern p;
    p.row = row;
    p.col = col;
    p.channel_values.assign(static_cast<std::size_t>(channels), 1.0);
    return p;
}

BackdoorPattern make_white_box(int h, int w, int channels, int box_size) {
    check_dims(h, w, channels);
    if (box_size < 1 || box_size > h || box_size > w)
        throw AttackError("white box size " + std::to_string(box_size) + " does not fit a " + std::to_string(h) +
                          "x" + std::to_string(w) + " image");
    PatchPattern p;
    p.mask = Image::zeros(h, w, channels);
    p.pattern = Image::zeros(h, w, channels);
    for (int i = h - box_size; i < h; ++i)
        for (int j = w - box_size; j < w; ++j)
            for (int c = 0; c < channels; ++c) {
                p.mask.at(i, j, c) = 1.0;
                p.pattern.at(i, j, c) = 1.0;
            }
    return p;
}

void validate_pattern(const BackdoorPattern& p) {
    std::visit(
        [](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, AdditivePattern>) {
                check_dims(v.delta.height, v.delta.width, v.delta.channels);
                if (v.delta.values.size() !=
                    static_cast<std::size_t>(v.delta.height) * v.delta.width * v.delta.channels)
                    throw AttackError("additive pattern value count does not match its dimensions");
                for (double d : v.delta.values)
                    if (!(d >= -1.0 && d <= 1.0))
                        throw AttackError("additive pattern entry " + std::to_string(d) + " outside [-1,1]");
            } else if constexpr (std::is_same_v<T, PatchPattern>) {
                v.mask.validate();
                v.pattern.validate();
                if (!(v.mask.height == v.pattern.height && v.mask.width == v.pattern.width &&
                      v.mask.channels == v.pattern.channels))
                    throw AttackError("patch mask and pattern have different shapes");
                for (double m : v.mask.pixels)
                    if (m != 0.0 && m != 1.0)
                        throw AttackError("patch mask entry " + std::to_string(m) + " is not binary");
            } else {
                if (v.channel_values.empty()) throw AttackError("pixel pattern has no channel values");
                if (v.row < 0 || v.col < 0)
                    throw AttackError("pixel pattern location (" + std::to_string(v.row) + "," +
                                      std::to_string(v.col) + ") is negative");
                for (double c : v.channel_values)
                    if (!(c >= 0.0 && c <= 1.0))
                        throw AttackError("pixel pattern value " + std::to_string(c) + " outside [0,1]");
            }
        },
        p);
}

Image embed(const Image& x, const BackdoorPattern& p) {
    Image out = x;
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, AdditivePattern>) {
                if (v.delta.height != x.height || v.delta.width != x.width || v.delta.channels != x.channels)
                    throw AttackError("additive pattern shape does not match image shape");
                for (std::size_t i = 0; i < out.pixels.size(); ++i)
                    out.pixels[i] = std::clamp(out.pixels[i] + v.delta.values[i], 0.0, 1.0);
            } else if constexpr (std::is_same_v<T, PatchPattern>) {
                if (v.mask.height != x.height || v.mask.width != x.width || v.mask.channels != x.channels)
                    throw AttackError("patch pattern shape does not match image shape");
                for (std::size_t i = 0; i < out.pixels.size(); ++i)
                    out.pixels[i] = v.mask.pixels[i] * v.pattern.pixels[i] + (1.0 - v.mask.pixels[i]) * out.pixels[i];
            } else {
                if (v.row >= x.height || v.col >= x.width)
                    throw AttackError("pixel pattern location outside image bounds");
                if (v.channel_values.size() != static_cast<std::size_t>(x.channels))
                    throw AttackError("pixel pattern channel count does not match image");
                for (int c = 0; c < x.channels; ++c)
                    out.at(v.row, v.col, c) = v.channel_values[static_cast<std::size_t>(c)];
            }
        },
        p);
    return out;
}

const char* pattern_type_name(const BackdoorPattern& p) {
    switch (p.index()) {
        case 0: return "additive";
        case 1: return "patch";
        default: return "pixel";
    }
}

std::string pattern_to_json(const BackdoorPattern& p) {
    validate_pattern(p);
    nlohmann::json j;
    j["schema_version"] = 1;
    j["type"] = pattern_type_name(p);
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, AdditivePattern>) {
                j["height"] = v.delta.height;
                j["width"] = v.delta.width;
                j["channels"] = v.delta.channels;
                j["delta"] = v.delta.values;
            } else if constexpr (std::is_same_v<T, PatchPattern>) {
                j["height"] = v.mask.height;
                j["width"] = v.mask.width;
                j["channels"] = v.mask.channels;
                j["mask"] = v.mask.pixels;
                j["pattern"] = v.pattern.pixels;
            } else {
                j["row"] = v.row;
                j["col"] = v.col;
                j["channel_values"] = v.channel_values;
            }
        },
        p);
    return j.dump(2);
}

BackdoorPattern pattern_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("pattern JSON parse failed: ") + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != 1)
            throw FormatError("unsupported pattern schema_version");
        std::string type = j.at("type").get<std::string>();
        BackdoorPattern out;
        if (type == "additive") {
            AdditivePattern p;
            p.delta.height = j.at("height").get<int>();
            p.delta.width = j.at("width").get<int>();
            p.delta.channels = j.at("channels").get<int>();
            p.delta.values = j.at("delta").get<std::vector<double>>();
            out = std::move(p);
        } else if (type == "patch") {
            PatchPattern p;
            int h = j.at("height").get<int>();
            int w = j.at("width").get<int>();
            int c = j.at("channels").get<int>();
            p.mask.height = p.pattern.height = h;
            p.mask.width = p.pattern.width = w;
            p.mask.channels = p.pattern.channels = c;
            p.mask.pixels = j.at("mask").get<std::vector<double>>();
            p.pattern.pixels = j.at("pattern").get<std::vector<double>>();
            out = std::move(p);
        } else if (type == "pixel") {
            PixelPattern p;
            p.row = j.at("row").get<int>();
            p.col = j.at("col").get<int>();
            p.channel_values = j.at("channel_values").get<std::vector<double>>();
            out = std::move(p);
        } else {
            throw FormatError("unknown pattern type \"" + type + "\"");
        }
        validate_pattern(out);
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("pattern JSON missing or mistyped field: ") + e.what());
    }
}

void save_pattern(const std::filesystem::path& path, const BackdoorPattern& p) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << pattern_to_json(p) << "\n";
    if (!out) throw IoError("write failed for " + path.string());
}

BackdoorPattern load_pattern(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return pattern_from_json(ss.str());
}

}  // namespace inflight
