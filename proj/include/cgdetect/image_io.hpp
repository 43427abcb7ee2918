#pragma once

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "cgdetect/colorspace.hpp"
#include "cgdetect/common.hpp"

namespace cgdetect {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct JpegErrorTrap {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
    std::longjmp(trap->jump, 1);
}

inline ImageTensor from_rgb8(const std::vector<unsigned char>& rgb, std::size_t h, std::size_t w) {
    ImageTensor img;
    img.height = h;
    img.width = w;
    img.space = ColorSpace::RGB;
    img.values.resize(h * w * 3);
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        img.values[i] = static_cast<float>(rgb[i]) / 255.0f;
    }
    return img;
}

inline std::vector<unsigned char> to_rgb8(const ImageTensor& img) {
    std::vector<unsigned char> rgb(img.values.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        const float v = clamp01(img.values[i]);
        rgb[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    return rgb;
}

inline ImageTensor decode_jpeg_file(std::FILE* f, const std::string& path) {
    jpeg_decompress_struct cinfo;
    JpegErrorTrap trap;
    cinfo.err = jpeg_std_error(&trap.mgr);
    trap.mgr.error_exit = jpeg_error_exit;

    std::vector<unsigned char> rgb;
    if (setjmp(trap.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw DataError("decode: corrupt JPEG: " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const std::size_t w = cinfo.output_width;
    const std::size_t h = cinfo.output_height;
    rgb.resize(h * w * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    // libjpeg pads truncated streams with an EOI and only warns; treat any
    // corrupt-data warning as a decode failure.
    const long warnings = cinfo.err->num_warnings;
    jpeg_destroy_decompress(&cinfo);
    if (warnings > 0) throw DataError("decode: truncated or corrupt JPEG: " + path);
    return from_rgb8(rgb, h, w);
}

inline ImageTensor decode_png_file(std::FILE* f, const std::string& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("decode: png init failed: " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("decode: png init failed: " + path);
    }
    std::vector<unsigned char> rgb;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("decode: corrupt PNG: " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const std::size_t w = png_get_image_width(png, info);
    const std::size_t h = png_get_image_height(png, info);
    if (png_get_rowbytes(png, info) != w * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("decode: unsupported PNG layout: " + path);
    }
    rgb.resize(h * w * 3);
    rows.resize(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = rgb.data() + y * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return from_rgb8(rgb, h, w);
}

}  // namespace detail

// Decodes a PNG or baseline JPEG (sniffed by magic bytes) to 8-bit RGB in
// [0,1]. Corrupt or truncated files raise DataError.
inline ImageTensor decode_image(const std::string& path) {
    detail::FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw DataError("decode: cannot open: " + path);
    unsigned char magic[8] = {};
    const std::size_t got = std::fread(magic, 1, sizeof(magic), f.get());
    std::rewind(f.get());
    if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) {
        return detail::decode_jpeg_file(f.get(), path);
    }
    if (got >= 8 && png_sig_cmp(magic, 0, 8) == 0) {
        return detail::decode_png_file(f.get(), path);
    }
    throw DataError("decode: not a PNG or JPEG: " + path);
}

inline void encode_png(const ImageTensor& img, const std::string& path) {
    detail::FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw DataError("encode: cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("encode: png init failed: " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("encode: png init failed: " + path);
    }
    auto rgb = detail::to_rgb8(img);
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = rgb.data() + y * img.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("encode: PNG write failed: " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline void encode_jpeg(const ImageTensor& img, const std::string& path, int quality = 92) {
    detail::FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw DataError("encode: cannot open for write: " + path);
    jpeg_compress_struct cinfo;
    detail::JpegErrorTrap trap;
    cinfo.err = jpeg_std_error(&trap.mgr);
    trap.mgr.error_exit = detail::jpeg_error_exit;
    if (setjmp(trap.jump)) {
        jpeg_destroy_compress(&cinfo);
        throw DataError("encode: JPEG write failed: " + path);
    }
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, f.get());
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    auto rgb = detail::to_rgb8(img);
    while (cinfo.next_scanline < cinfo.image_height) {
        unsigned char* row = rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.width * 3;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
}

}  // namespace cgdetect
