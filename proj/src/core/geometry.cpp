#include "core/geometry.hpp"

#include "core/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace spheregen {

namespace {

constexpr double k_pi = std::numbers::pi;

double deg2rad(double d) { return d * k_pi / 180.0; }

std::array<double, 3> cross(const std::array<double, 3>& a, const std::array<double, 3>& b)
{
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

std::array<double, 3> normalized(std::array<double, 3> v)
{
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

double dot3(const std::array<double, 3>& a, const SphereDirection& d) { return a[0] * d.x + a[1] * d.y + a[2] * d.z; }

// Integral column offset for an angle, or a domain error.
std::ptrdiff_t integral_columns(std::size_t width, double degrees, const char* what)
{
    const double k = degrees * static_cast<double>(width) / 360.0;
    const double r = std::round(k);
    if (std::abs(k - r) > 1e-9) {
        domain_fail(std::string(what) + ": " + std::to_string(degrees) + " degrees is not a whole number of columns at width " +
                    std::to_string(width));
    }
    return static_cast<std::ptrdiff_t>(r);
}

std::size_t wrap(std::ptrdiff_t v, std::size_t w)
{
    const auto W = static_cast<std::ptrdiff_t>(w);
    return static_cast<std::size_t>(((v % W) + W) % W);
}

Tensor apply_column_map(const Tensor& x, const std::vector<std::size_t>& map)
{
    const std::size_t W = x.shape().back();
    Tensor out(x.shape());
    const std::size_t rows = x.numel() / W;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < W; ++j) {
            out[r * W + j] = x[r * W + map[j]];
        }
    }
    return out;
}

// Bilinear sampling of a [C x H x W] equirect at continuous pixel coords,
// wrapping horizontally and clamping vertically.
void sample_equirect(const Tensor& img, double row, double col, double* out)
{
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    row = std::clamp(row, 0.0, static_cast<double>(H - 1));
    const auto r0 = static_cast<std::size_t>(std::floor(row));
    const std::size_t r1 = std::min(r0 + 1, H - 1);
    const double fr = row - static_cast<double>(r0);
    const double cf = std::floor(col);
    const double fc = col - cf;
    const std::size_t c0 = wrap(static_cast<std::ptrdiff_t>(cf), W);
    const std::size_t c1 = (c0 + 1) % W;
    for (std::size_t c = 0; c < C; ++c) {
        const double* p = img.data() + c * H * W;
        const double top = p[r0 * W + c0] * (1 - fc) + p[r0 * W + c1] * fc;
        const double bot = p[r1 * W + c0] * (1 - fc) + p[r1 * W + c1] * fc;
        out[c] = top * (1 - fr) + bot * fr;
    }
}

void sample_clamped(const Tensor& img, double row, double col, double* out)
{
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    row = std::clamp(row, 0.0, static_cast<double>(H - 1));
    col = std::clamp(col, 0.0, static_cast<double>(W - 1));
    const auto r0 = static_cast<std::size_t>(std::floor(row));
    const auto c0 = static_cast<std::size_t>(std::floor(col));
    const std::size_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
    const double fr = row - static_cast<double>(r0), fc = col - static_cast<double>(c0);
    for (std::size_t c = 0; c < C; ++c) {
        const double* p = img.data() + c * H * W;
        const double top = p[r0 * W + c0] * (1 - fc) + p[r0 * W + c1] * fc;
        const double bot = p[r1 * W + c0] * (1 - fc) + p[r1 * W + c1] * fc;
        out[c] = top * (1 - fr) + bot * fr;
    }
}

void check_image(const Tensor& x, const char* op)
{
    if (x.rank() != 3) {
        domain_fail(std::string(op) + ": expected C x H x W image, got " + shape_string(x.shape()));
    }
}

} // namespace

EquirectGrid EquirectGrid::from_height(std::size_t h)
{
    EquirectGrid g{h, 2 * h};
    g.validate();
    return g;
}

void EquirectGrid::validate() const
{
    require(height > 0 && width == 2 * height,
            "equirect grid must satisfy W = 2H (got " + std::to_string(height) + "x" + std::to_string(width) + ")");
}

double EquirectGrid::longitude(std::size_t j) const
{
    return 2.0 * k_pi * (static_cast<double>(j) + 0.5) / static_cast<double>(width) - k_pi;
}

double EquirectGrid::colatitude(std::size_t i) const
{
    return k_pi * (static_cast<double>(i) + 0.5) / static_cast<double>(height);
}

SphereDirection SphereDirection::from_vector(double x, double y, double z)
{
    const double n = std::sqrt(x * x + y * y + z * z);
    require(n > 0.0 && std::isfinite(n), "direction must be a finite non-zero vector");
    return {x / n, y / n, z / n};
}

SphereDirection SphereDirection::from_lon_lat(double lon_deg, double lat_deg)
{
    const double theta = deg2rad(lon_deg);
    const double phi = deg2rad(90.0 - lat_deg);
    return from_vector(std::sin(phi) * std::cos(theta), std::sin(phi) * std::sin(theta), std::cos(phi));
}

SphereDirection SphereDirection::rotated_about_z(double degrees) const
{
    const double a = deg2rad(degrees);
    return {x * std::cos(a) - y * std::sin(a), x * std::sin(a) + y * std::cos(a), z};
}

void ViewSpec::validate() const
{
    require(std::isfinite(fov_deg) && fov_deg > 0.0, "view fov must be positive");
    require(fov_deg >= k_min_fov - 1e-9 && fov_deg <= k_max_fov + 1e-9,
            "view fov " + std::to_string(fov_deg) + " outside [30, 120] degrees");
    require(aspect > 0.0 && std::isfinite(aspect), "view aspect must be positive");
    const double n = std::sqrt(center.dot(center));
    require(std::abs(n - 1.0) < 1e-9, "view center must be a unit vector");
}

std::string SymmetryType::name() const
{
    const auto a = static_cast<int>(std::lround(angle_deg));
    return (kind == SymmetryKind::rotation ? "rot" : "plane") + std::to_string(a);
}

int SymmetryType::order() const
{
    if (kind == SymmetryKind::plane) {
        return 2;
    }
    const auto a = static_cast<int>(std::lround(angle_deg)) % 360;
    if (a == 0) {
        return 1;
    }
    return 360 / std::gcd(a, 360);
}

const std::array<SymmetryType, k_num_symmetries>& symmetry_registry()
{
    static const std::array<SymmetryType, k_num_symmetries> registry{{
        {SymmetryKind::rotation, 90.0},
        {SymmetryKind::rotation, 180.0},
        {SymmetryKind::rotation, 270.0},
        {SymmetryKind::plane, 0.0},
        {SymmetryKind::plane, 90.0},
    }};
    return registry;
}

std::vector<std::string> registry_names()
{
    std::vector<std::string> names;
    for (const auto& t : symmetry_registry()) {
        names.push_back(t.name());
    }
    return names;
}

SymmetryType symmetry_by_name(std::string_view name)
{
    for (const auto& t : symmetry_registry()) {
        if (t.name() == name) {
            return t;
        }
    }
    domain_fail("unknown symmetry type '" + std::string(name) + "'");
}

SphereDirection pixel_to_direction(std::size_t i, std::size_t j, const EquirectGrid& g)
{
    if (i >= g.height || j >= g.width) {
        domain_fail("pixel (" + std::to_string(i) + ", " + std::to_string(j) + ") outside " + std::to_string(g.height) +
                    "x" + std::to_string(g.width) + " grid");
    }
    const double theta = g.longitude(j);
    const double phi = g.colatitude(i);
    return {std::sin(phi) * std::cos(theta), std::sin(phi) * std::sin(theta), std::cos(phi)};
}

std::pair<std::size_t, std::size_t> direction_to_pixel(const SphereDirection& d, const EquirectGrid& g)
{
    const double theta = std::atan2(d.y, d.x);
    const double phi = std::acos(std::clamp(d.z, -1.0, 1.0));
    auto j = static_cast<std::ptrdiff_t>(std::floor((theta + k_pi) * static_cast<double>(g.width) / (2.0 * k_pi)));
    auto i = static_cast<std::ptrdiff_t>(std::floor(phi * static_cast<double>(g.height) / k_pi));
    j = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(g.width) - 1);
    i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(g.height) - 1);
    return {static_cast<std::size_t>(i), static_cast<std::size_t>(j)};
}

Tensor circular_pad(const Tensor& x, std::size_t p)
{
    require(x.rank() >= 1, "circular_pad on scalar");
    const std::size_t W = x.shape().back();
    if (p > W) {
        domain_fail("circular_pad: pad " + std::to_string(p) + " exceeds width " + std::to_string(W));
    }
    Shape s = x.shape();
    s.back() = W + 2 * p;
    Tensor out(s);
    const std::size_t rows = x.numel() / W, Wo = W + 2 * p;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < Wo; ++j) {
            out[r * Wo + j] = x[r * W + wrap(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(p), W)];
        }
    }
    return out;
}

std::vector<std::size_t> shift_column_map(std::size_t width, double degrees)
{
    const std::ptrdiff_t k = integral_columns(width, degrees, "circular_shift");
    std::vector<std::size_t> map(width);
    for (std::size_t j = 0; j < width; ++j) {
        map[j] = wrap(static_cast<std::ptrdiff_t>(j) - k, width);
    }
    return map;
}

std::vector<std::size_t> flip_column_map(std::size_t width, double axis_degrees)
{
    // theta' = 2*axis - theta; on pixel centers this is j -> W-1-j plus a
    // circular shift of 2*axis.
    const std::ptrdiff_t k = integral_columns(width, 2.0 * axis_degrees, "flip_about_longitude");
    std::vector<std::size_t> map(width);
    for (std::size_t j = 0; j < width; ++j) {
        map[j] = wrap(static_cast<std::ptrdiff_t>(width) - 1 - static_cast<std::ptrdiff_t>(j) + k, width);
    }
    return map;
}

std::vector<std::size_t> transform_column_map(std::size_t width, const SymmetryType& t)
{
    return t.kind == SymmetryKind::rotation ? shift_column_map(width, t.angle_deg) : flip_column_map(width, t.angle_deg);
}

bool registry_compatible(std::size_t width)
{
    try {
        for (const auto& t : symmetry_registry()) {
            (void)transform_column_map(width, t);
        }
    } catch (const DomainError&) {
        return false;
    }
    return width > 0;
}

Tensor circular_shift(const Tensor& x, double degrees)
{
    require(x.rank() >= 1, "circular_shift on scalar");
    return apply_column_map(x, shift_column_map(x.shape().back(), degrees));
}

Tensor flip_about_longitude(const Tensor& x, double axis_degrees)
{
    require(x.rank() >= 1, "flip_about_longitude on scalar");
    return apply_column_map(x, flip_column_map(x.shape().back(), axis_degrees));
}

Tensor symmetry_transform(const Tensor& x, const SymmetryType& t)
{
    return t.kind == SymmetryKind::rotation ? circular_shift(x, t.angle_deg) : flip_about_longitude(x, t.angle_deg);
}

ag::Var symmetry_transform(const ag::Var& x, const SymmetryType& t)
{
    require(!x.shape().empty(), "symmetry_transform on scalar");
    const auto map = transform_column_map(x.shape().back(), t);
    return ag::permute_columns(x, map);
}

Tensor weight_map(const EquirectGrid& g, const SphereDirection& c, double kappa)
{
    g.validate();
    require(std::isfinite(kappa), "weight_map: kappa must be finite");
    Tensor out({g.height, g.width});
    for (std::size_t i = 0; i < g.height; ++i) {
        for (std::size_t j = 0; j < g.width; ++j) {
            out[i * g.width + j] = std::exp(kappa * pixel_to_direction(i, j, g).dot(c));
        }
    }
    return out;
}

Tensor area_average(const Tensor& map, std::size_t h, std::size_t w)
{
    require(map.rank() == 2, "area_average expects an H x W map");
    const std::size_t H = map.dim(0), W = map.dim(1);
    require(h > 0 && w > 0 && H % h == 0 && W % w == 0,
            "area_average: " + std::to_string(H) + "x" + std::to_string(W) + " not divisible into " + std::to_string(h) +
                "x" + std::to_string(w));
    const std::size_t by = H / h, bx = W / w;
    Tensor out({h, w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double acc = 0.0;
            for (std::size_t y = 0; y < by; ++y)
                for (std::size_t x = 0; x < bx; ++x)
                    acc += map[(i * by + y) * W + j * bx + x];
            out[i * w + j] = acc / static_cast<double>(by * bx);
        }
    }
    return out;
}

ViewBasis view_basis(const ViewSpec& view)
{
    require(view.fov_deg > 0.0 && view.fov_deg < 180.0, "degenerate view frustum (fov must be in (0, 180))");
    require(view.aspect > 0.0, "view aspect must be positive");
    ViewBasis b{};
    b.forward = normalized({view.center.x, view.center.y, view.center.z});
    std::array<double, 3> ref{0.0, 0.0, 1.0};
    if (std::abs(b.forward[2]) > 0.999) {
        ref = {1.0, 0.0, 0.0};
    }
    auto right = normalized(cross(b.forward, ref));
    auto up = cross(right, b.forward);
    const double cr = std::cos(view.roll), sr = std::sin(view.roll);
    for (int k = 0; k < 3; ++k) {
        b.right[k] = cr * right[k] + sr * up[k];
        b.up[k] = -sr * right[k] + cr * up[k];
    }
    b.tan_half_h = std::tan(deg2rad(view.fov_deg) / 2.0);
    b.tan_half_v = b.tan_half_h / view.aspect;
    return b;
}

bool project_to_view(const ViewBasis& b, const SphereDirection& d, double& px, double& py)
{
    const double f = dot3(b.forward, d);
    if (f <= 1e-12) {
        return false;
    }
    px = dot3(b.right, d) / f;
    py = dot3(b.up, d) / f;
    return true;
}

Tensor render_nfov(const Tensor& equirect, const ViewSpec& view, std::size_t size)
{
    check_image(equirect, "render_nfov");
    require(size > 0, "render_nfov: empty size");
    const ViewBasis b = view_basis(view);
    const std::size_t C = equirect.dim(0), H = equirect.dim(1), W = equirect.dim(2);
    Tensor out({C, size, size});
    std::vector<double> px(C);
    for (std::size_t a = 0; a < size; ++a) {
        for (std::size_t c = 0; c < size; ++c) {
            const double x = (2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(size) - 1.0) * b.tan_half_h;
            const double y = (1.0 - 2.0 * (static_cast<double>(a) + 0.5) / static_cast<double>(size)) * b.tan_half_v;
            const auto d = SphereDirection::from_vector(b.forward[0] + x * b.right[0] + y * b.up[0],
                                                        b.forward[1] + x * b.right[1] + y * b.up[1],
                                                        b.forward[2] + x * b.right[2] + y * b.up[2]);
            const double theta = std::atan2(d.y, d.x);
            const double phi = std::acos(std::clamp(d.z, -1.0, 1.0));
            const double col = (theta + k_pi) * static_cast<double>(W) / (2.0 * k_pi) - 0.5;
            const double row = phi * static_cast<double>(H) / k_pi - 0.5;
            sample_equirect(equirect, row, col, px.data());
            for (std::size_t ch = 0; ch < C; ++ch) {
                out[(ch * size + a) * size + c] = px[ch];
            }
        }
    }
    return out;
}

PartialImage project_nfov(const Tensor& nfov, const ViewSpec& view, const EquirectGrid& grid, double fill)
{
    check_image(nfov, "project_nfov");
    grid.validate();
    const ViewBasis b = view_basis(view);
    const std::size_t C = nfov.dim(0), S_h = nfov.dim(1), S_w = nfov.dim(2);
    PartialImage out{Tensor({C, grid.height, grid.width}, fill), Tensor({grid.height, grid.width}, 0.0)};
    std::vector<double> px(C);
    const std::size_t HW = grid.height * grid.width;
    for (std::size_t i = 0; i < grid.height; ++i) {
        for (std::size_t j = 0; j < grid.width; ++j) {
            double x = 0.0, y = 0.0;
            if (!project_to_view(b, pixel_to_direction(i, j, grid), x, y)) {
                continue;
            }
            if (std::abs(x) > b.tan_half_h || std::abs(y) > b.tan_half_v) {
                continue;
            }
            const double col = (x / b.tan_half_h + 1.0) * static_cast<double>(S_w) / 2.0 - 0.5;
            const double row = (1.0 - y / b.tan_half_v) * static_cast<double>(S_h) / 2.0 - 0.5;
            sample_clamped(nfov, row, col, px.data());
            for (std::size_t c = 0; c < C; ++c) {
                out.image[c * HW + i * grid.width + j] = px[c];
            }
            out.mask[i * grid.width + j] = 1.0;
        }
    }
    return out;
}

PartialImage nfov_to_equirect(const Tensor& equirect, const ViewSpec& view, double fill)
{
    check_image(equirect, "nfov_to_equirect");
    const EquirectGrid grid{equirect.dim(1), equirect.dim(2)};
    grid.validate();
    const Tensor nfov = render_nfov(equirect, view, grid.height);
    return project_nfov(nfov, view, grid, fill);
}

Tensor mask_extract(const Tensor& x, const Tensor& mask)
{
    check_image(x, "mask_extract");
    if (mask.rank() != 2 || mask.dim(0) != x.dim(1) || mask.dim(1) != x.dim(2)) {
        domain_fail("mask_extract: mask " + shape_string(mask.shape()) + " does not match image " + shape_string(x.shape()));
    }
    Tensor out(x.shape());
    const std::size_t HW = mask.numel();
    for (std::size_t c = 0; c < x.dim(0); ++c) {
        for (std::size_t p = 0; p < HW; ++p) {
            out[c * HW + p] = x[c * HW + p] * mask[p];
        }
    }
    return out;
}

} // namespace spheregen
