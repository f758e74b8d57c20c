#include "core/image_io.hpp"

#include "core/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace spheregen {

namespace {

Tensor load_png(const std::string& path, png_uint_32 format, std::size_t channels)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&img, path.c_str()) == 0) {
        throw DataError("cannot read PNG " + path + ": " + img.message);
    }
    img.format = format;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr) == 0) {
        png_image_free(&img);
        throw DataError("cannot decode PNG " + path + ": " + img.message);
    }
    const std::size_t h = img.height;
    const std::size_t w = img.width;
    Tensor out({channels, h, w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t c = 0; c < channels; ++c) {
                out[(c * h + i) * w + j] = buf[(i * w + j) * channels + c] / 255.0;
            }
        }
    }
    return out;
}

png_byte quantize(double v)
{
    if (!std::isfinite(v)) {
        throw NumericError("non-finite pixel value while writing PNG");
    }
    return static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

} // namespace

Tensor load_png_rgb(const std::string& path) { return load_png(path, PNG_FORMAT_RGB, 3); }

Tensor load_png_gray(const std::string& path)
{
    Tensor t = load_png(path, PNG_FORMAT_GRAY, 1);
    return t.reshaped({t.dim(1), t.dim(2)});
}

void save_png(const std::string& path, const Tensor& image)
{
    std::size_t c = 1;
    std::size_t h = 0;
    std::size_t w = 0;
    if (image.rank() == 2) {
        h = image.dim(0);
        w = image.dim(1);
    } else if (image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3)) {
        c = image.dim(0);
        h = image.dim(1);
        w = image.dim(2);
    } else {
        domain_fail("save_png: expected [3 x H x W], [1 x H x W] or [H x W], got " + shape_string(image.shape()));
    }
    std::vector<png_byte> buf(c * h * w);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t k = 0; k < c; ++k) {
                buf[(i * w + j) * c + k] = quantize(image[(k * h + i) * w + j]);
            }
        }
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr) == 0) {
        throw DataError("cannot write PNG " + path + ": " + img.message);
    }
}

} // namespace spheregen
