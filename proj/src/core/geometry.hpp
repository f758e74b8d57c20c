#pragma once

// Equirectangular sphere geometry: pixel/direction conversion, circular
// padding, the symmetry transform family, NFOV projection and the
// concentration weight map.
//
// Conventions: pixel (i, j) of an H x W grid (W = 2H) has its center at
// longitude theta_j = 2*pi*(j + 0.5)/W - pi and colatitude
// phi_i = pi*(i + 0.5)/H; its direction is
// (sin phi cos theta, sin phi sin theta, cos phi). Row 0 is the north pole
// (+z, opposite to gravity).

#include "core/autograd.hpp"
#include "core/tensor.hpp"

#include <array>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace spheregen {

struct EquirectGrid {
    std::size_t height = 0;
    std::size_t width = 0;

    static EquirectGrid from_height(std::size_t h);
    void validate() const;
    double longitude(std::size_t j) const;
    double colatitude(std::size_t i) const;
};

struct SphereDirection {
    double x = 1.0;
    double y = 0.0;
    double z = 0.0;

    // Normalizes (x, y, z); zero vectors are rejected.
    static SphereDirection from_vector(double x, double y, double z);
    // Longitude/latitude in degrees (latitude +90 = north pole).
    static SphereDirection from_lon_lat(double lon_deg, double lat_deg);
    double dot(const SphereDirection& o) const noexcept { return x * o.x + y * o.y + z * o.z; }
    // Rotation about the gravity (z) axis.
    SphereDirection rotated_about_z(double degrees) const;
};

struct ViewSpec {
    SphereDirection center{};
    double fov_deg = 90.0;
    double aspect = 1.0;
    double roll = 0.0; // radians

    static constexpr double k_min_fov = 30.0;
    static constexpr double k_max_fov = 120.0;

    // Range check used for training views / CLI input.
    void validate() const;
};

enum class SymmetryKind { rotation, plane };

struct SymmetryType {
    SymmetryKind kind = SymmetryKind::rotation;
    double angle_deg = 0.0;

    std::string name() const;
    // Smallest n >= 1 with T^n = identity.
    int order() const;
    friend bool operator==(const SymmetryType&, const SymmetryType&) = default;
};

inline constexpr std::size_t k_num_symmetries = 5;

// Fixed order [rot90, rot180, rot270, plane0, plane90].
const std::array<SymmetryType, k_num_symmetries>& symmetry_registry();
std::vector<std::string> registry_names();
SymmetryType symmetry_by_name(std::string_view name);

SphereDirection pixel_to_direction(std::size_t i, std::size_t j, const EquirectGrid& g);
std::pair<std::size_t, std::size_t> direction_to_pixel(const SphereDirection& d, const EquirectGrid& g);

// Wraps p columns from each edge to the opposite side (last axis).
Tensor circular_pad(const Tensor& x, std::size_t p);

// Index maps along the last axis (out[j] = in[map[j]]).
std::vector<std::size_t> shift_column_map(std::size_t width, double degrees);
std::vector<std::size_t> flip_column_map(std::size_t width, double axis_degrees);
std::vector<std::size_t> transform_column_map(std::size_t width, const SymmetryType& t);
// True when every registry type is an exact column permutation at this width.
bool registry_compatible(std::size_t width);

Tensor circular_shift(const Tensor& x, double degrees);
Tensor flip_about_longitude(const Tensor& x, double axis_degrees);
Tensor symmetry_transform(const Tensor& x, const SymmetryType& t);
ag::Var symmetry_transform(const ag::Var& x, const SymmetryType& t);

// exp(kappa <v(i,j), c>) on the grid, shape [H x W].
Tensor weight_map(const EquirectGrid& g, const SphereDirection& c, double kappa);
// Area-average an [H x W] map down to [h x w] (h | H, w | W).
Tensor area_average(const Tensor& map, std::size_t h, std::size_t w);

// Camera basis of a view: forward, right, up.
struct ViewBasis {
    std::array<double, 3> forward, right, up;
    double tan_half_h, tan_half_v;
};
ViewBasis view_basis(const ViewSpec& view);

// Continuous perspective-plane coordinates (x, y) in tangent units, or
// nullopt-like flag when the direction is behind the camera.
bool project_to_view(const ViewBasis& b, const SphereDirection& d, double& px, double& py);

// Perspective rendering of an equirect image [C x H x W] into [C x S x S].
Tensor render_nfov(const Tensor& equirect, const ViewSpec& view, std::size_t size);

struct PartialImage {
    Tensor image; // [C x H x W]
    Tensor mask;  // [H x W], 1 inside the view
};

inline constexpr double k_gray_fill = 0.5;

// Places a perspective image [C x S x S] onto the equirect grid; pixels
// outside the frustum take the fill value.
PartialImage project_nfov(const Tensor& nfov, const ViewSpec& view, const EquirectGrid& grid, double fill = k_gray_fill);

// Crop an NFOV view from a panorama and re-project it (the training input).
PartialImage nfov_to_equirect(const Tensor& equirect, const ViewSpec& view, double fill = k_gray_fill);

// Elementwise product with a [H x W] mask broadcast over channels.
Tensor mask_extract(const Tensor& x, const Tensor& mask);

} // namespace spheregen
