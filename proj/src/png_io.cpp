#include "fsdet/png_io.hpp"

#include <zlib.h>

#include <cstdlib>
#include <cstring>
#include <fstream>

#include "fsdet/errors.hpp"

namespace fsdet {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_begin = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uLong crc = crc32(crc32(0L, nullptr, 0), out.data() + crc_begin,
                            static_cast<uInt>(out.size() - crc_begin));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace

void write_png_rgb8(const std::string& path, std::int64_t width, std::int64_t height,
                    const std::vector<std::uint8_t>& rgb) {
    if (width < 1 || height < 1 ||
        rgb.size() != static_cast<std::size_t>(width * height * 3)) {
        throw DataError("write_png_rgb8: buffer size does not match dimensions");
    }
    // Filter type 0 per scanline.
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height * (1 + width * 3)));
    for (std::int64_t y = 0; y < height; ++y) {
        raw.push_back(0);
        const std::uint8_t* row = rgb.data() + y * width * 3;
        raw.insert(raw.end(), row, row + width * 3);
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(comp_size);
    if (compress2(compressed.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK) {
        throw Error("write_png_rgb8: deflate failed");
    }
    compressed.resize(comp_size);

    std::vector<std::uint8_t> out(kSignature, kSignature + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(width));
    put_u32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", compressed);
    append_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("write_png_rgb8: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write_png_rgb8: write failed for " + path);
}

PngImage read_png_rgb8(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_png_rgb8: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0) {
        throw ParseError("read_png_rgb8: not a PNG file: " + path);
    }
    PngImage img;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    std::int64_t bit_depth = 0, color_type = -1;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw ParseError("read_png_rgb8: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.width = get_u32(payload);
            img.height = get_u32(payload + 4);
            bit_depth = payload[8];
            color_type = payload[9];
            if (bit_depth != 8 || color_type != 2 || payload[12] != 0) {
                throw ParseError("read_png_rgb8: only 8-bit non-interlaced RGB is supported");
            }
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (img.width < 1 || img.height < 1) throw ParseError("read_png_rgb8: missing IHDR");

    const std::int64_t row_bytes = img.width * 3;
    const std::size_t raw_size = static_cast<std::size_t>(img.height * (1 + row_bytes));
    std::vector<std::uint8_t> raw(raw_size);
    uLongf dest = static_cast<uLongf>(raw_size);
    if (uncompress(raw.data(), &dest, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        dest != raw_size) {
        throw ParseError("read_png_rgb8: inflate failed");
    }

    img.rgb.assign(static_cast<std::size_t>(img.height * row_bytes), 0);
    auto paeth = [](int a, int b, int c) {
        const int p = a + b - c;
        const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
        if (pa <= pb && pa <= pc) return a;
        if (pb <= pc) return b;
        return c;
    };
    for (std::int64_t y = 0; y < img.height; ++y) {
        const std::uint8_t filter = raw[static_cast<std::size_t>(y * (1 + row_bytes))];
        const std::uint8_t* src = raw.data() + y * (1 + row_bytes) + 1;
        std::uint8_t* dst = img.rgb.data() + y * row_bytes;
        const std::uint8_t* prev = y > 0 ? img.rgb.data() + (y - 1) * row_bytes : nullptr;
        for (std::int64_t i = 0; i < row_bytes; ++i) {
            const int a = i >= 3 ? dst[i - 3] : 0;
            const int b = prev ? prev[i] : 0;
            const int c = (prev && i >= 3) ? prev[i - 3] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw ParseError("read_png_rgb8: unknown filter type");
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

}  // namespace fsdet
