#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsdet {

// Minimal PNG support for the synthetic datasets: 8-bit RGB, non-interlaced,
// zlib-deflated with a fixed compression level so outputs are byte-stable.
void write_png_rgb8(const std::string& path, std::int64_t width, std::int64_t height,
                    const std::vector<std::uint8_t>& rgb);

struct PngImage {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint8_t> rgb;
};

PngImage read_png_rgb8(const std::string& path);

}  // namespace fsdet
