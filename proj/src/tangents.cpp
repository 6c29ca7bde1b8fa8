#include "ibp/tangents.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ibp {

namespace {

constexpr std::string_view kTangentNames[] = {"shift-x", "shift-y", "scale-x", "scale-y", "rotation"};
constexpr char kCacheMagic[] = {'I', 'B', 'P', 'T', 'A', 'N', '1'};

struct Planes {
    std::size_t c, h, w;
};

Planes planes_of(const Tensor& img, const char* op) {
    if (img.rank() != 3)
        throw DimensionError(std::string(op) + ": expected C x H x W image, got " + to_string(img.shape()));
    return {img.dim(0), img.dim(1), img.dim(2)};
}

template <class T>
void put(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& in) {
    unsigned char b[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("tangent cache truncated");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
}

}  // namespace

std::string_view to_string(TangentKind kind) { return kTangentNames[static_cast<std::size_t>(kind)]; }

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian smoothing needs sigma > 0");
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : k) v /= total;
    return k;
}

Tensor gaussian_smooth(const Tensor& img, double sigma) {
    const auto [c, h, w] = planes_of(img, "gaussian_smooth");
    const std::vector<double> k = gaussian_kernel(sigma);
    const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);

    Tensor rows(img.shape()), out(img.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = img.raw() + ch * h * w;
        double* tmp = rows.raw() + ch * h * w;
        double* dst = out.raw() + ch * h * w;
        for (std::ptrdiff_t y = 0; y < H; ++y)
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::ptrdiff_t t = -r; t <= r; ++t) {
                    const std::ptrdiff_t xx = x + t;
                    if (xx >= 0 && xx < W) s += k[static_cast<std::size_t>(t + r)] * src[y * W + xx];
                }
                tmp[y * W + x] = s;
            }
        for (std::ptrdiff_t y = 0; y < H; ++y)
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::ptrdiff_t t = -r; t <= r; ++t) {
                    const std::ptrdiff_t yy = y + t;
                    if (yy >= 0 && yy < H) s += k[static_cast<std::size_t>(t + r)] * tmp[yy * W + x];
                }
                dst[y * W + x] = s;
            }
    }
    return out;
}

Tensor derivative_x(const Tensor& img) {
    const auto [c, h, w] = planes_of(img, "derivative_x");
    Tensor out(img.shape());
    if (w < 2) return out;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y) {
            const double* s = img.raw() + (ch * h + y) * w;
            double* d = out.raw() + (ch * h + y) * w;
            d[0] = s[1] - s[0];
            d[w - 1] = s[w - 1] - s[w - 2];
            for (std::size_t x = 1; x + 1 < w; ++x) d[x] = 0.5 * (s[x + 1] - s[x - 1]);
        }
    return out;
}

Tensor derivative_y(const Tensor& img) {
    const auto [c, h, w] = planes_of(img, "derivative_y");
    Tensor out(img.shape());
    if (h < 2) return out;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* s = img.raw() + ch * h * w;
        double* d = out.raw() + ch * h * w;
        for (std::size_t x = 0; x < w; ++x) {
            d[x] = s[w + x] - s[x];
            d[(h - 1) * w + x] = s[(h - 1) * w + x] - s[(h - 2) * w + x];
        }
        for (std::size_t y = 1; y + 1 < h; ++y)
            for (std::size_t x = 0; x < w; ++x) d[y * w + x] = 0.5 * (s[(y + 1) * w + x] - s[(y - 1) * w + x]);
    }
    return out;
}

TangentSet tangent_vectors(const Tensor& img, double sigma) {
    const auto [c, h, w] = planes_of(img, "tangent_vectors");
    const Tensor smooth = gaussian_smooth(img, sigma);
    const Tensor gx = derivative_x(smooth), gy = derivative_y(smooth);
    const double cx = 0.5 * (static_cast<double>(w) - 1.0), cy = 0.5 * (static_cast<double>(h) - 1.0);

    TangentSet set;
    set.sigma = sigma;
    set.vectors[0] = gx;
    set.vectors[1] = gy;
    for (std::size_t k = 2; k < kTangentCount; ++k) set.vectors[k] = Tensor(img.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t i = (ch * h + y) * w + x;
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                set.vectors[2][i] = dx * gx[i];
                set.vectors[3][i] = dy * gy[i];
                set.vectors[4][i] = dy * gx[i] - dx * gy[i];
            }
    return set;
}

void normalize_rows(Tensor& t) {
    const std::size_t n = t.rank() == 0 ? 0 : t.dim(0);
    for (std::size_t b = 0; b < n; ++b) {
        auto row = t.row(b);
        double ss = 0.0;
        for (double v : row) ss += v * v;
        if (ss == 0.0) continue;
        const double inv = 1.0 / std::sqrt(ss);
        for (double& v : row) v *= inv;
    }
}

std::vector<Tensor> dataset_tangents(const Tensor& images, double sigma, bool normalize) {
    if (images.rank() != 4)
        throw DimensionError("dataset_tangents: expected N x C x H x W, got " + to_string(images.shape()));
    const std::size_t n = images.dim(0), stride = images.stride0();
    const Shape one(images.shape().begin() + 1, images.shape().end());
    std::vector<Tensor> out(kTangentCount, Tensor(images.shape()));
    for (std::size_t i = 0; i < n; ++i) {
        auto src = images.row(i);
        const TangentSet set = tangent_vectors(Tensor(one, std::vector<double>(src.begin(), src.end())), sigma);
        for (std::size_t k = 0; k < kTangentCount; ++k)
            std::memcpy(out[k].raw() + i * stride, set.vectors[k].raw(), stride * sizeof(double));
    }
    if (normalize)
        for (Tensor& t : out) normalize_rows(t);
    return out;
}

std::uint64_t tangent_cache_key(const Tensor& images, double sigma, bool normalize) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffU;
            h *= 1099511628211ULL;
        }
    };
    for (std::size_t e : images.shape()) mix(e);
    for (double v : images.data()) mix(std::bit_cast<std::uint64_t>(v));
    mix(std::bit_cast<std::uint64_t>(sigma));
    mix(normalize ? 1 : 0);
    return h;
}

void save_tangent_cache(const std::filesystem::path& path, std::uint64_t key, const std::vector<Tensor>& tangents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write tangent cache " + path.string());
    out.write(kCacheMagic, sizeof(kCacheMagic));
    put<std::uint64_t>(out, key);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tangents.size()));
    for (const Tensor& t : tangents) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
        for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw FormatError("failed writing tangent cache " + path.string());
}

std::optional<std::vector<Tensor>> load_tangent_cache(const std::filesystem::path& path, std::uint64_t key) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    char magic[sizeof(kCacheMagic)];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
        throw FormatError("not a tangent cache (bad magic at offset 0): " + path.string());
    if (get<std::uint64_t>(in) != key) return std::nullopt;
    const auto count = get<std::uint32_t>(in);
    std::vector<Tensor> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto rank = get<std::uint32_t>(in);
        if (rank > 8) throw FormatError("tangent cache: implausible rank");
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(in));
        Tensor t(shape);
        for (double& v : t.data()) v = std::bit_cast<double>(get<std::uint64_t>(in));
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace ibp
