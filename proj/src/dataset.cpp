#include "ibp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>

namespace ibp {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
    if (b.size() < off + 4)
        throw FormatError(path.string() + ": truncated header at offset " + std::to_string(off));
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
    Tensor out({labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) out[i * classes + labels[i]] = 1.0;
    return out;
}

}  // namespace

Shape Dataset::sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

std::size_t Dataset::label_of(std::size_t i) const {
    auto row = labels.row(i);
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Dataset Dataset::take(const std::vector<std::size_t>& idx) const {
    Shape is = images.shape(), ls = labels.shape();
    is[0] = ls[0] = idx.size();
    Dataset out{Tensor(is), Tensor(ls), mean_pixel};
    const std::size_t si = images.stride0(), sl = labels.stride0();
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= size()) throw DimensionError("Dataset::take: index out of range");
        std::memcpy(out.images.raw() + k * si, images.raw() + idx[k] * si, si * sizeof(double));
        std::memcpy(out.labels.raw() + k * sl, labels.raw() + idx[k] * sl, sl * sizeof(double));
    }
    return out;
}

Dataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto ib = read_file(images);
    const auto lb = read_file(labels);
    if (be32(ib, 0, images) != 2051)
        throw FormatError(images.string() + ": bad magic at offset 0 (expected 2051)");
    if (be32(lb, 0, labels) != 2049)
        throw FormatError(labels.string() + ": bad magic at offset 0 (expected 2049)");
    const std::size_t n = be32(ib, 4, images), rows = be32(ib, 8, images), cols = be32(ib, 12, images);
    const std::size_t nl = be32(lb, 4, labels);
    if (n != nl)
        throw FormatError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (ib.size() < 16 + n * rows * cols) throw FormatError(images.string() + ": truncated pixel data");
    if (lb.size() < 8 + n) throw FormatError(labels.string() + ": truncated label data");

    Dataset ds;
    ds.images = Tensor({n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<double>(ib[16 + i]) / 255.0;
    std::vector<std::size_t> cls(n);
    for (std::size_t i = 0; i < n; ++i) {
        cls[i] = lb[8 + i];
        if (cls[i] > 9) throw FormatError(labels.string() + ": label out of range at offset " + std::to_string(8 + i));
    }
    ds.labels = one_hot(cls, 10);
    return ds;
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& batches) {
    constexpr std::size_t kRecord = 3073, kPixels = 3072;
    std::vector<unsigned char> all;
    for (const auto& p : batches) {
        const auto b = read_file(p);
        if (b.size() % kRecord != 0)
            throw FormatError(p.string() + ": length " + std::to_string(b.size()) + " is not a multiple of 3073");
        all.insert(all.end(), b.begin(), b.end());
    }
    const std::size_t n = all.size() / kRecord;
    Dataset ds;
    ds.images = Tensor({n, 3, 32, 32});
    std::vector<std::size_t> cls(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = all.data() + i * kRecord;
        cls[i] = rec[0];
        if (cls[i] > 9) throw FormatError("CIFAR-10 label out of range in record " + std::to_string(i));
        for (std::size_t j = 0; j < kPixels; ++j) ds.images[i * kPixels + j] = static_cast<double>(rec[1 + j]) / 255.0;
    }
    ds.labels = one_hot(cls, 10);
    return ds;
}

std::filesystem::path data_dir(const std::optional<std::filesystem::path>& override_dir) {
    if (override_dir) return *override_dir;
    if (const char* env = std::getenv("IBP_DATA_DIR"); env && *env) return env;
    return "data";
}

Dataset load_mnist_split(const std::filesystem::path& dir, bool train) {
    const std::string p = train ? "train" : "t10k";
    return load_mnist(dir / (p + "-images-idx3-ubyte"), dir / (p + "-labels-idx1-ubyte"));
}

Dataset load_cifar10_split(const std::filesystem::path& dir, bool train) {
    std::vector<std::filesystem::path> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
        files.push_back(dir / "test_batch.bin");
    return load_cifar10(files);
}

double mean_pixel(const Dataset& ds) {
    if (ds.images.empty()) throw DimensionError("mean_pixel of an empty dataset");
    return sum(ds.images) / static_cast<double>(ds.images.size()) + ds.mean_pixel;
}

Tensor normalize(const Tensor& x, double mean) {
    Tensor out = x;
    for (double& v : out.data()) v -= mean;
    return out;
}

Tensor denormalize(const Tensor& x, double mean) {
    Tensor out = x;
    for (double& v : out.data()) v += mean;
    return out;
}

void normalize(Dataset& ds, double mean) {
    ds.images = normalize(denormalize(ds.images, ds.mean_pixel), mean);
    ds.mean_pixel = mean;
}

std::vector<std::size_t> stratified_indices(const Dataset& ds, std::size_t n, std::uint64_t seed) {
    if (n > ds.size())
        throw ConfigError("subset of " + std::to_string(n) + " requested from " + std::to_string(ds.size()) + " samples");
    const std::size_t k = ds.classes();
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.label_of(i)].push_back(i);

    Rng rng(derive_seed(seed, "subset"));
    std::vector<std::size_t> picked;
    picked.reserve(n);
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t want = n / k + (c < n % k ? 1 : 0);
        auto& pool = by_class[c];
        if (want > pool.size())
            throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                              " samples, stratified subset needs " + std::to_string(want));
        // partial Fisher-Yates
        for (std::size_t i = 0; i < want; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
            picked.push_back(pool[i]);
        }
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) { return ds.take(stratified_indices(ds, n, seed)); }

AugmentSpec AugmentSpec::identity() { return {0.0, 1.0, 1.0, 0.0, 0.0}; }

void AugmentSpec::validate() const {
    if (!(max_shift >= 0.0) || !(max_rotation_deg >= 0.0)) throw ConfigError("augment ranges must be non-negative");
    if (!(min_scale > 0.0 && min_scale <= max_scale)) throw ConfigError("augment scale range must satisfy 0 < min <= max");
}

AffineParams sample_affine(const AugmentSpec& spec, Rng& rng) {
    spec.validate();
    AffineParams t;
    t.shift_x = rng.uniform(-spec.max_shift, spec.max_shift);
    t.shift_y = rng.uniform(-spec.max_shift, spec.max_shift);
    t.scale_x = rng.uniform(spec.min_scale, spec.max_scale);
    t.scale_y = rng.uniform(spec.min_scale, spec.max_scale);
    t.angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg) * std::numbers::pi / 180.0;
    return t;
}

Tensor warp(const Tensor& img, const AffineParams& t, double fill) {
    if (img.rank() != 3) throw DimensionError("warp: expected C x H x W image, got " + to_string(img.shape()));
    if (t.scale_x == 0.0 || t.scale_y == 0.0) throw ConfigError("warp: zero scale");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const double cx = 0.5 * (static_cast<double>(w) - 1.0), cy = 0.5 * (static_cast<double>(h) - 1.0);
    const double co = std::cos(t.angle), si = std::sin(t.angle);
    const auto W = static_cast<std::ptrdiff_t>(w), H = static_cast<std::ptrdiff_t>(h);

    Tensor out(img.shape());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double px = static_cast<double>(x) - t.shift_x - cx;
            const double py = static_cast<double>(y) - t.shift_y - cy;
            // R(-angle) then S^-1
            const double sx = (co * px + si * py) / t.scale_x + cx;
            const double sy = (-si * px + co * py) / t.scale_y + cy;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const double ax = sx - fx, ay = sy - fy;
            const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
            const std::ptrdiff_t xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
            const double wx[2] = {1.0 - ax, ax}, wy[2] = {1.0 - ay, ay};
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* src = img.raw() + ch * h * w;
                double v = 0.0;
                for (int j = 0; j < 2; ++j) {
                    if (wy[j] == 0.0) continue;
                    for (int i = 0; i < 2; ++i) {
                        if (wx[i] == 0.0) continue;
                        const bool inside = xs[i] >= 0 && xs[i] < W && ys[j] >= 0 && ys[j] < H;
                        v += wy[j] * wx[i] * (inside ? src[ys[j] * W + xs[i]] : fill);
                    }
                }
                out[(ch * h + y) * w + x] = v;
            }
        }
    return out;
}

Tensor augment(const Tensor& img, const AugmentSpec& spec, Rng& rng) { return warp(img, sample_affine(spec, rng), spec.fill); }

}  // namespace ibp
