#pragma once

#include <filesystem>
#include <string>
#include <variant>

#include "inflight/image.hpp"

namespace inflight {

// Backdoor pattern variants. One universal embedding function `embed`
// applies any of them to an image.

// x -> clip(x + delta, 0, 1); delta values in [-1,1].
struct AdditivePattern {
    RealGrid delta;
};

// x -> mask .* pattern + (1-mask) .* x; mask entries exactly 0 or 1.
struct PatchPattern {
    Image mask;
    Image pattern;
};

// x -> overwrite one coordinate with fixed per-channel values in [0,1].
struct PixelPattern {
    int row = 0;
    int col = 0;
    std::vector<double> channel_values;
};

using BackdoorPattern = std::variant<AdditivePattern, PatchPattern, PixelPattern>;

// Alternating lattice: delta[i,j,*] = amplitude when (i+j) is even, else 0.
BackdoorPattern make_chessboard(int h, int w, int channels, double amplitude);

// One pixel saturated to 1.0 (byte 255) in every channel.
BackdoorPattern make_single_pixel(int h, int w, int channels, int row, int col);

// box_size x box_size all-white patch in the bottom-right corner.
BackdoorPattern make_white_box(int h, int w, int channels, int box_size);

// Throws AttackError when a pattern violates its variant invariants.
void validate_pattern(const BackdoorPattern& p);

Image embed(const Image& x, const BackdoorPattern& p);

const char* pattern_type_name(const BackdoorPattern& p);

// JSON container (schema_version, type tag, dims, payload values).
std::string pattern_to_json(const BackdoorPattern& p);
BackdoorPattern pattern_from_json(const std::string& text);
void save_pattern(const std::filesystem::path& path, const BackdoorPattern& p);
BackdoorPattern load_pattern(const std::filesystem::path& path);

}  // namespace inflight
