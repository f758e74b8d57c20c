#include "core/tensor.hpp"

#include "core/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace spheregen {

std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end())
{
    require(data_.size() == shape_numel(shape_), "tensor data size does not match shape " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data))
{
    require(data_.size() == shape_numel(shape_), "tensor data size does not match shape " + shape_string(shape_));
}

Tensor Tensor::uninit(Shape shape)
{
    Storage data(shape_numel(shape));
    return Tensor(std::move(shape), std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const
{
    require(axis < shape_.size(), "tensor axis out of range");
    return shape_[axis];
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
{
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const
{
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const
{
    require(shape_numel(shape) == numel(), "reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other)
{
    require(same_shape(other), "shape mismatch in += : " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

Tensor& Tensor::operator*=(double k)
{
    for (auto& v : data_) {
        v *= k;
    }
    return *this;
}

Tensor Tensor::item(std::size_t n) const
{
    require(!shape_.empty() && n < shape_[0], "batch item out of range");
    Shape s = shape_;
    s[0] = 1;
    const std::size_t stride = numel() / shape_[0];
    return Tensor(s, Storage(data_.begin() + static_cast<std::ptrdiff_t>(n * stride),
                                         data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * stride)));
}

void Tensor::set_item(std::size_t n, const Tensor& value)
{
    require(!shape_.empty() && n < shape_[0], "batch item out of range");
    const std::size_t stride = numel() / shape_[0];
    require(value.numel() == stride, "set_item size mismatch");
    std::copy(value.data_.begin(), value.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(n * stride));
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    require(a.same_shape(b), "max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

double sum_abs(const Tensor& t)
{
    double s = 0.0;
    for (double v : t.values()) {
        s += std::abs(v);
    }
    return s;
}

bool all_finite(const Tensor& t)
{
    return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

Tensor stack_items(std::span<const Tensor> items)
{
    require(!items.empty(), "stack_items on empty list");
    Shape s = items.front().shape();
    require(!s.empty() && s[0] == 1, "stack_items expects leading dim 1");
    s[0] = items.size();
    Tensor out(s);
    for (std::size_t i = 0; i < items.size(); ++i) {
        require(items[i].shape() == items.front().shape(), "stack_items shape mismatch");
        out.set_item(i, items[i]);
    }
    return out;
}

} // namespace spheregen
