#include "lmdet/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "lmdet/errors.hpp"

namespace lmdet {

namespace {

void png_error_fn(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void png_warn_fn(png_structp, png_const_charp) {}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

GrayImage read_png_file(const std::string& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw DataError("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                             png_error_fn, png_warn_fn);
    if (!png) throw DataError("png reader allocation failed: " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("png reader allocation failed: " + path);
    }

    // libpng reports errors by longjmp; everything touched after the jump
    // must already hold its final value.
    GrayImage out;
    volatile bool ok = false;
    std::string defect;
    if (!setjmp(png_jmpbuf(png))) {
        png_init_io(png, file.get());
        png_read_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
        int color = png_get_color_type(png, info);
        int depth = png_get_bit_depth(png, info);
        if (color != PNG_COLOR_TYPE_GRAY) {
            defect = "not grayscale";
        } else if (depth != 8 && depth != 16) {
            defect = "bit depth " + std::to_string(depth) + " (want 8 or 16)";
        } else {
            out.height = static_cast<int>(png_get_image_height(png, info));
            out.width = static_cast<int>(png_get_image_width(png, info));
            out.bit_depth = depth;
            out.pixels.resize(static_cast<size_t>(out.height) * out.width);
            png_bytepp rows = png_get_rows(png, info);
            float maxval = depth == 8 ? 255.0f : 65535.0f;
            for (int r = 0; r < out.height; ++r) {
                png_bytep row = rows[r];
                for (int c = 0; c < out.width; ++c) {
                    unsigned v = depth == 8
                                     ? row[c]
                                     : (unsigned(row[2 * c]) << 8) | row[2 * c + 1];
                    out.at(r, c) = static_cast<float>(v) / maxval;
                }
            }
            ok = true;
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (!ok) {
        if (defect.empty()) defect = "corrupt PNG data";
        throw DataError("invalid PNG (" + defect + "): " + path);
    }
    return out;
}

// P5 header fields are separated by whitespace; '#' starts a comment that
// runs to end of line.
bool pgm_token(std::istream& in, std::string& tok) {
    tok.clear();
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return true;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return !tok.empty();
}

GrayImage read_pgm_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    std::string tok;
    auto fail = [&](const std::string& why) -> GrayImage {
        throw DataError("invalid PGM (" + why + "): " + path);
    };
    if (!pgm_token(in, tok) || tok != "P5") return fail("bad magic");
    long w = 0, h = 0, maxval = 0;
    auto read_long = [&](long& dst, const char* what) {
        if (!pgm_token(in, tok)) fail(std::string("missing ") + what);
        size_t used = 0;
        try {
            dst = std::stol(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || dst <= 0) fail(std::string("bad ") + what);
    };
    read_long(w, "width");
    read_long(h, "height");
    read_long(maxval, "maxval");
    if (maxval > 65535) return fail("maxval over 65535");
    // exactly one whitespace byte separates the header from the raster;
    // pgm_token already consumed it.
    GrayImage out;
    out.height = static_cast<int>(h);
    out.width = static_cast<int>(w);
    out.bit_depth = maxval < 256 ? 8 : 16;
    size_t count = static_cast<size_t>(h) * static_cast<size_t>(w);
    int bytes = maxval < 256 ? 1 : 2;
    std::vector<unsigned char> raw(count * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size()) return fail("truncated raster");
    out.pixels.resize(count);
    for (size_t i = 0; i < count; ++i) {
        unsigned v = bytes == 1 ? raw[i] : (unsigned(raw[2 * i]) << 8) | raw[2 * i + 1];
        if (v > static_cast<unsigned>(maxval)) return fail("sample over maxval");
        out.pixels[i] = static_cast<float>(v) / static_cast<float>(maxval);
    }
    return out;
}

unsigned quantize(float v, unsigned maxval) {
    if (!(v > 0.0f)) return 0;
    if (v >= 1.0f) return maxval;
    return static_cast<unsigned>(std::lround(v * static_cast<float>(maxval)));
}

void check_writable_geometry(const GrayImage& image, const std::string& path) {
    if (image.height <= 0 || image.width <= 0)
        throw ContractError("image geometry must be positive to write " + path);
    if (image.pixels.size() != static_cast<size_t>(image.height) * image.width)
        throw ContractError("pixel count does not match geometry for " + path);
}

}  // namespace

GrayImage read_gray(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DataError("cannot open image: " + path);
    unsigned char magic[8] = {0};
    probe.read(reinterpret_cast<char*>(magic), 8);
    std::streamsize got = probe.gcount();
    probe.close();
    static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (got >= 8 && std::memcmp(magic, png_sig, 8) == 0) return read_png_file(path);
    if (got >= 2 && magic[0] == 'P' && magic[1] == '5') return read_pgm_file(path);
    throw DataError("unrecognized image format (want PNG or PGM P5): " + path);
}

void write_png(const GrayImage& image, const std::string& path) {
    check_writable_geometry(image, path);
    if (image.bit_depth != 8 && image.bit_depth != 16)
        throw ContractError("png bit depth must be 8 or 16 for " + path);

    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw DataError("cannot create image: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                              png_error_fn, png_warn_fn);
    if (!png) throw DataError("png writer allocation failed: " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("png writer allocation failed: " + path);
    }

    int bytes = image.bit_depth / 8;
    unsigned maxval = image.bit_depth == 8 ? 255u : 65535u;
    // 16-bit PNG samples are big-endian on disk.
    std::vector<unsigned char> raster(static_cast<size_t>(image.height) * image.width * bytes);
    std::vector<png_bytep> rows(static_cast<size_t>(image.height));
    for (int r = 0; r < image.height; ++r) {
        unsigned char* row = raster.data() + static_cast<size_t>(r) * image.width * bytes;
        rows[static_cast<size_t>(r)] = row;
        for (int c = 0; c < image.width; ++c) {
            unsigned v = quantize(image.at(r, c), maxval);
            if (bytes == 1) {
                row[c] = static_cast<unsigned char>(v);
            } else {
                row[2 * c] = static_cast<unsigned char>(v >> 8);
                row[2 * c + 1] = static_cast<unsigned char>(v & 0xff);
            }
        }
    }

    volatile bool ok = false;
    if (!setjmp(png_jmpbuf(png))) {
        png_init_io(png, file.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                     static_cast<png_uint_32>(image.height), image.bit_depth,
                     PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_set_rows(png, info, rows.data());
        png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
        ok = true;
    }
    png_destroy_write_struct(&png, &info);
    if (!ok) throw DataError("png write failed: " + path);
}

void write_pgm(const GrayImage& image, const std::string& path) {
    check_writable_geometry(image, path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create image: " + path);
    out << "P5\n" << image.width << " " << image.height << "\n255\n";
    std::vector<unsigned char> raw(image.pixels.size());
    for (size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(quantize(image.pixels[i], 255u));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("pgm write failed: " + path);
}

}  // namespace lmdet
