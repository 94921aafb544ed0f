#pragma once

// Minimal image containers and PNG I/O: 8-bit RGB for color, 16-bit grayscale
// for depth (millimeters, 0 = no measurement). 16-bit samples are stored in
// PNG network byte order and swapped on little-endian hosts.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "sdfrecon/core.hpp"

namespace sdfrecon {

struct ImageRGB8 {
    int width = 0, height = 0;
    std::vector<std::uint8_t> data;  // interleaved rgb, row-major

    ImageRGB8() = default;
    ImageRGB8(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 3, 0) {}
    std::uint8_t* px(int u, int v) { return &data[(static_cast<size_t>(v) * width + u) * 3]; }
    const std::uint8_t* px(int u, int v) const {
        return &data[(static_cast<size_t>(v) * width + u) * 3];
    }
};

struct ImageGray16 {
    int width = 0, height = 0;
    std::vector<std::uint16_t> data;  // row-major

    ImageGray16() = default;
    ImageGray16(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h, 0) {}
    std::uint16_t& at(int u, int v) { return data[static_cast<size_t>(v) * width + u]; }
    std::uint16_t at(int u, int v) const { return data[static_cast<size_t>(v) * width + u]; }
};

// Linear color in [0,1], used by the renderer before quantization.
struct ImageRGBf {
    int width = 0, height = 0;
    std::vector<float> data;  // interleaved rgb

    ImageRGBf() = default;
    ImageRGBf(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 3, 0.f) {}
    float* px(int u, int v) { return &data[(static_cast<size_t>(v) * width + u) * 3]; }
    const float* px(int u, int v) const {
        return &data[(static_cast<size_t>(v) * width + u) * 3];
    }
};

inline ImageRGB8 quantize_rgb8(const ImageRGBf& img) {
    ImageRGB8 out(img.width, img.height);
    for (size_t i = 0; i < img.data.size(); ++i) {
        float v = img.data[i];
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        out.data[i] = static_cast<std::uint8_t>(v * 255.f + 0.5f);
    }
    return out;
}

namespace detail {

struct PngFile {
    FILE* f = nullptr;
    explicit PngFile(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~PngFile() {
        if (f) std::fclose(f);
    }
    PngFile(const PngFile&) = delete;
    PngFile& operator=(const PngFile&) = delete;
};

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

}  // namespace detail

inline void write_png_rgb8(const std::string& path, const ImageRGB8& img) {
    detail::PngFile file(path, "wb");
    if (!file.f) throw DataError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng failure writing " + path);
    }
    png_init_io(png, file.f);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.height);
    for (int v = 0; v < img.height; ++v)
        rows[v] = const_cast<png_bytep>(img.px(0, v));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline void write_png_gray16(const std::string& path, const ImageGray16& img) {
    detail::PngFile file(path, "wb");
    if (!file.f) throw DataError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng failure writing " + path);
    }
    png_init_io(png, file.f);
    png_set_IHDR(png, info, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (detail::host_is_little_endian()) png_set_swap(png);
    std::vector<png_bytep> rows(img.height);
    for (int v = 0; v < img.height; ++v)
        rows[v] = reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(&img.at(0, v)));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline ImageRGB8 read_png_rgb8(const std::string& path) {
    detail::PngFile file(path, "rb");
    if (!file.f) throw DataError("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng failure reading " + path);
    }
    png_init_io(png, file.f);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    ImageRGB8 img(static_cast<int>(png_get_image_width(png, info)),
                  static_cast<int>(png_get_image_height(png, info)));
    if (png_get_rowbytes(png, info) != static_cast<size_t>(img.width) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("unexpected row size reading " + path);
    }
    std::vector<png_bytep> rows(img.height);
    for (int v = 0; v < img.height; ++v) rows[v] = img.px(0, v);
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline ImageGray16 read_png_gray16(const std::string& path) {
    detail::PngFile file(path, "rb");
    if (!file.f) throw DataError("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng failure reading " + path);
    }
    png_init_io(png, file.f);
    png_read_info(png, info);
    if (png_get_bit_depth(png, info) != 16 ||
        png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("expected 16-bit grayscale PNG: " + path);
    }
    if (detail::host_is_little_endian()) png_set_swap(png);
    png_read_update_info(png, info);
    ImageGray16 img(static_cast<int>(png_get_image_width(png, info)),
                    static_cast<int>(png_get_image_height(png, info)));
    std::vector<png_bytep> rows(img.height);
    for (int v = 0; v < img.height; ++v)
        rows[v] = reinterpret_cast<png_bytep>(&img.at(0, v));
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace sdfrecon
