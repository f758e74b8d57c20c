#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace spheregen {

using Shape = std::vector<std::size_t>;

// Leaves elements uninitialized on resize; explicit fills still apply.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    using value_type = T;

    // 64-byte aligned.
    static constexpr std::align_val_t k_align{64};
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), k_align)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, k_align); }
    template <typename U>
    void construct(U* p) noexcept
    {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args)
    {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using Storage = std::vector<double, DefaultInitAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major real tensor. Image-like data is laid out N x C x H x W.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
    // Contents unspecified; for outputs that are fully overwritten.
    static Tensor uninit(Shape shape);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // 4-D accessors (N, C, H, W).
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    Tensor reshaped(Shape shape) const;
    void fill(double v);

    // In-place accumulate; shapes must agree.
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double k);

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    // Slice of one batch item of an N x ... tensor, returned with leading dim 1.
    Tensor item(std::size_t n) const;
    void set_item(std::size_t n, const Tensor& value);

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Tensor(Shape shape, Storage data);

    Shape shape_;
    Storage data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
double sum_abs(const Tensor& t);
bool all_finite(const Tensor& t);

// Stack equally-shaped [1 x ...] tensors along the leading axis.
Tensor stack_items(std::span<const Tensor> items);

} // namespace spheregen
