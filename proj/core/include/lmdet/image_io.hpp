#pragma once

#include <string>
#include <vector>

namespace lmdet {

/// Row-major grayscale raster normalized to [0,1]. bit_depth is the stored
/// sample width (8 or 16) and controls quantization on write.
struct GrayImage {
    int height = 0;
    int width = 0;
    int bit_depth = 8;
    std::vector<float> pixels;  // height*width values in [0,1]

    float at(int r, int c) const { return pixels[static_cast<size_t>(r) * width + c]; }
    float& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }
};

/// Reads an 8- or 16-bit grayscale PNG or binary PGM (P5), detected by
/// magic bytes. Throws DataError naming the file on any defect.
GrayImage read_gray(const std::string& path);

/// Writes a grayscale PNG at image.bit_depth (8 or 16). Values are clamped
/// to [0,1] and quantized to the stored grid.
void write_png(const GrayImage& image, const std::string& path);

/// Writes an 8-bit binary PGM (P5).
void write_pgm(const GrayImage& image, const std::string& path);

}  // namespace lmdet
