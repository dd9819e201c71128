#include "nd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "nd/rng.hpp"

namespace nd {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("data: " + what); }

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<unsigned char>& buf, size_t off) {
    if (off + 4 > buf.size())
        fail("truncated file at byte offset " + std::to_string(buf.size()) + " (need " +
             std::to_string(off + 4) + ")");
    return (static_cast<std::uint32_t>(buf[off]) << 24) | (static_cast<std::uint32_t>(buf[off + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[off + 2]) << 8) | static_cast<std::uint32_t>(buf[off + 3]);
}

// Computes per-channel mean/std over raw [0,1] images.
void compute_norm(const std::vector<Sample>& pool, int channels, std::vector<double>& mean,
                  std::vector<double>& stddev) {
    mean.assign(static_cast<size_t>(channels), 0.0);
    stddev.assign(static_cast<size_t>(channels), 0.0);
    std::int64_t per_channel = 0;
    for (const auto& s : pool) {
        const std::int64_t hw = s.image.numel() / channels;
        per_channel += hw;
        for (int c = 0; c < channels; ++c) {
            const double* p = s.image.data.data() + c * hw;
            for (std::int64_t i = 0; i < hw; ++i) mean[static_cast<size_t>(c)] += p[i];
        }
    }
    for (auto& m : mean) m /= static_cast<double>(per_channel);
    for (const auto& s : pool) {
        const std::int64_t hw = s.image.numel() / channels;
        for (int c = 0; c < channels; ++c) {
            const double* p = s.image.data.data() + c * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const double d = p[i] - mean[static_cast<size_t>(c)];
                stddev[static_cast<size_t>(c)] += d * d;
            }
        }
    }
    for (auto& v : stddev) v = std::max(std::sqrt(v / static_cast<double>(per_channel)), 1e-8);
}

// Shuffle, normalize, and cut the pool 50/50 into train/val; normalize test
// with the pool's constants.
DatasetSplit assemble(std::vector<Sample> pool, std::vector<Sample> test, int classes, int channels,
                      int image_size, std::uint64_t seed) {
    DatasetSplit ds;
    ds.num_classes = classes;
    ds.channels = channels;
    ds.image_size = image_size;
    compute_norm(pool, channels, ds.channel_mean, ds.channel_std);

    CounterRng shuffle_rng(derive_seed(seed, "data.shuffle"));
    std::vector<int> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    shuffle_rng.shuffle(order);

    const size_t n_train = pool.size() / 2;
    for (size_t i = 0; i < order.size(); ++i) {
        Sample s = std::move(pool[static_cast<size_t>(order[i])]);
        s.image = normalize_image(s.image, ds.channel_mean, ds.channel_std);
        (i < n_train ? ds.train : ds.val).push_back(std::move(s));
    }
    for (auto& s : test) {
        s.image = normalize_image(s.image, ds.channel_mean, ds.channel_std);
        ds.test.push_back(std::move(s));
    }
    return ds;
}

}  // namespace

const std::vector<Sample>& DatasetSplit::part(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    fail("unknown split part '" + name + "'");
}

Tensor normalize_image(const Tensor& chw, const std::vector<double>& mean, const std::vector<double>& std) {
    Tensor out = chw;
    const int C = chw.dim(0);
    const std::int64_t hw = chw.numel() / C;
    for (int c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
            out.data[static_cast<size_t>(c * hw + i)] =
                (chw.data[static_cast<size_t>(c * hw + i)] - mean[static_cast<size_t>(c)]) /
                std[static_cast<size_t>(c)];
    return out;
}

Tensor denormalize_image(const Tensor& chw, const std::vector<double>& mean, const std::vector<double>& std) {
    Tensor out = chw;
    const int C = chw.dim(0);
    const std::int64_t hw = chw.numel() / C;
    for (int c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
            out.data[static_cast<size_t>(c * hw + i)] =
                chw.data[static_cast<size_t>(c * hw + i)] * std[static_cast<size_t>(c)] +
                mean[static_cast<size_t>(c)];
    return out;
}

DatasetSplit load_synthetic(const SyntheticOptions& opt) {
    if (opt.classes < 2) fail("synthetic: need at least 2 classes");
    if (opt.samples < 2 * opt.classes) fail("synthetic: need at least 2 samples per class");

    // class prototypes: zero-mean bump patterns around a 0.5 base
    CounterRng proto_rng(derive_seed(opt.seed, "data.proto"));
    const int S = opt.image_size;
    std::vector<Tensor> prototypes;
    for (int c = 0; c < opt.classes; ++c) {
        Tensor proto({opt.channels, S, S});
        for (int ch = 0; ch < opt.channels; ++ch) {
            std::vector<double> pattern(static_cast<size_t>(S) * S, 0.0);
            for (int bmp = 0; bmp < opt.blobs_per_class; ++bmp) {
                const double cx = (0.15 + 0.7 * proto_rng.uniform01()) * S;
                const double cy = (0.15 + 0.7 * proto_rng.uniform01()) * S;
                const double w = (0.10 + 0.15 * proto_rng.uniform01()) * S;
                const double amp = (proto_rng.uniform01() < 0.5 ? -1.0 : 1.0) * (0.5 + 0.5 * proto_rng.uniform01());
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x)
                        pattern[static_cast<size_t>(y * S + x)] +=
                            amp * std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2.0 * w * w));
            }
            double m = 0.0;
            for (double v : pattern) m += v;
            m /= static_cast<double>(pattern.size());
            double peak = 1e-12;
            for (double v : pattern) peak = std::max(peak, std::abs(v - m));
            for (int i = 0; i < S * S; ++i)
                proto.data[static_cast<size_t>(ch * S * S + i)] =
                    0.5 + opt.pattern_amplitude * (pattern[static_cast<size_t>(i)] - m) / peak;
        }
        prototypes.push_back(std::move(proto));
    }

    auto render = [&](CounterRng& rng, int count) {
        std::vector<Sample> out;
        for (int i = 0; i < count; ++i) {
            Sample s;
            s.label = i % opt.classes;
            s.image = prototypes[static_cast<size_t>(s.label)];
            Tensor noise = rng.normal_tensor(s.image.shape, 0.0, opt.pixel_noise);
            for (std::int64_t e = 0; e < s.image.numel(); ++e)
                s.image.at(e) = std::clamp(s.image.at(e) + noise.at(e), 0.0, 1.0);
            out.push_back(std::move(s));
        }
        return out;
    };

    CounterRng train_rng(derive_seed(opt.seed, "data.train"));
    CounterRng test_rng(derive_seed(opt.seed, "data.test"));
    return assemble(render(train_rng, opt.samples), render(test_rng, opt.test_samples), opt.classes,
                    opt.channels, opt.image_size, opt.seed);
}

namespace {

std::vector<Sample> parse_idx_pair(const std::string& images_path, const std::string& labels_path,
                                   int num_classes, int* image_size) {
    const auto img = read_file(images_path);
    const auto lbl = read_file(labels_path);
    if (be32(img, 0) != 0x00000803u)
        fail("'" + images_path + "': bad magic at byte offset 0 (want 0x00000803)");
    if (be32(lbl, 0) != 0x00000801u)
        fail("'" + labels_path + "': bad magic at byte offset 0 (want 0x00000801)");
    const std::uint32_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
    if (be32(lbl, 4) != n) fail("label count " + std::to_string(be32(lbl, 4)) + " != image count " + std::to_string(n));
    const size_t want_img = 16 + static_cast<size_t>(n) * rows * cols;
    if (img.size() < want_img)
        fail("'" + images_path + "': truncated at byte offset " + std::to_string(img.size()) + " (need " +
             std::to_string(want_img) + ")");
    const size_t want_lbl = 8 + n;
    if (lbl.size() < want_lbl)
        fail("'" + labels_path + "': truncated at byte offset " + std::to_string(lbl.size()) + " (need " +
             std::to_string(want_lbl) + ")");
    *image_size = static_cast<int>(rows);
    if (rows != cols) fail("idx: non-square images " + std::to_string(rows) + "x" + std::to_string(cols));

    std::vector<Sample> out;
    for (std::uint32_t i = 0; i < n; ++i) {
        Sample s;
        s.label = lbl[8 + i];
        if (s.label < 0 || s.label >= num_classes)
            fail("'" + labels_path + "': label " + std::to_string(s.label) + " out of range [0," +
                 std::to_string(num_classes) + ") at record " + std::to_string(i));
        s.image = Tensor({1, static_cast<int>(rows), static_cast<int>(cols)});
        const size_t off = 16 + static_cast<size_t>(i) * rows * cols;
        for (std::uint32_t p = 0; p < rows * cols; ++p)
            s.image.at(static_cast<std::int64_t>(p)) = img[off + p] / 255.0;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

DatasetSplit load_idx(const IdxOptions& opt) {
    int size = 0;
    auto pool = parse_idx_pair(opt.train_images, opt.train_labels, opt.num_classes, &size);
    std::vector<Sample> test;
    if (!opt.test_images.empty()) {
        int tsize = 0;
        test = parse_idx_pair(opt.test_images, opt.test_labels, opt.num_classes, &tsize);
        if (tsize != size) fail("idx: train/test image sizes differ");
    }
    return assemble(std::move(pool), std::move(test), opt.num_classes, 1, size, opt.seed);
}

namespace {

constexpr size_t kCifarRecord = 3073;  // label byte + 3x32x32 pixel bytes

std::vector<Sample> parse_cifar_file(const std::string& path) {
    const auto buf = read_file(path);
    if (buf.size() % kCifarRecord != 0)
        fail("'" + path + "': truncated at byte offset " + std::to_string(buf.size()) +
             " (records are " + std::to_string(kCifarRecord) + " bytes)");
    std::vector<Sample> out;
    for (size_t off = 0; off < buf.size(); off += kCifarRecord) {
        Sample s;
        s.label = buf[off];
        if (s.label < 0 || s.label > 9)
            fail("'" + path + "': label " + std::to_string(s.label) + " out of range [0,10) at byte offset " +
                 std::to_string(off));
        s.image = Tensor({3, 32, 32});
        for (int i = 0; i < 3072; ++i) s.image.at(i) = buf[off + 1 + static_cast<size_t>(i)] / 255.0;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

DatasetSplit load_cifar10(const CifarOptions& opt) {
    std::vector<Sample> pool;
    for (const auto& f : opt.train_files) {
        auto part = parse_cifar_file(f);
        std::move(part.begin(), part.end(), std::back_inserter(pool));
    }
    if (pool.empty()) fail("cifar10: no training records");
    std::vector<Sample> test;
    if (!opt.test_file.empty()) test = parse_cifar_file(opt.test_file);
    return assemble(std::move(pool), std::move(test), 10, 3, 32, opt.seed);
}

Tensor area_downscale(const Tensor& chw, int out_size) {
    const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    if (H == out_size && W == out_size) return chw;
    Tensor out({C, out_size, out_size});
    const double ry = static_cast<double>(H) / out_size;
    const double rx = static_cast<double>(W) / out_size;
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < out_size; ++oy)
            for (int ox = 0; ox < out_size; ++ox) {
                const double y0 = oy * ry, y1 = (oy + 1) * ry;
                const double x0 = ox * rx, x1 = (ox + 1) * rx;
                double acc = 0.0;
                for (int iy = static_cast<int>(y0); iy < static_cast<int>(std::ceil(y1)); ++iy) {
                    const double wy = std::min<double>(y1, iy + 1) - std::max<double>(y0, iy);
                    for (int ix = static_cast<int>(x0); ix < static_cast<int>(std::ceil(x1)); ++ix) {
                        const double wx = std::min<double>(x1, ix + 1) - std::max<double>(x0, ix);
                        acc += wy * wx * chw.data[static_cast<size_t>((c * H + iy) * W + ix)];
                    }
                }
                out.data[static_cast<size_t>((c * out_size + oy) * out_size + ox)] = acc / (ry * rx);
            }
    return out;
}

DatasetSplit subset(const DatasetSplit& split, int per_class, int image_size) {
    DatasetSplit out;
    out.num_classes = split.num_classes;
    out.channels = split.channels;
    out.image_size = image_size;
    out.channel_mean = split.channel_mean;
    out.channel_std = split.channel_std;

    auto cut = [&](const std::vector<Sample>& src, std::vector<Sample>& dst, const char* part) {
        if (src.empty()) return;
        std::vector<int> taken(static_cast<size_t>(split.num_classes), 0);
        for (const auto& s : src) {
            if (taken[static_cast<size_t>(s.label)] >= per_class) continue;
            ++taken[static_cast<size_t>(s.label)];
            Sample copy;
            copy.label = s.label;
            copy.image = image_size == split.image_size ? s.image : area_downscale(s.image, image_size);
            dst.push_back(std::move(copy));
        }
        for (int c = 0; c < split.num_classes; ++c)
            if (taken[static_cast<size_t>(c)] < per_class)
                fail(std::string("subset: ") + part + " has only " + std::to_string(taken[static_cast<size_t>(c)]) +
                     " samples of class " + std::to_string(c) + ", need " + std::to_string(per_class));
    };
    cut(split.train, out.train, "train");
    cut(split.val, out.val, "val");
    cut(split.test, out.test, "test");
    return out;
}

Tensor make_batch(const std::vector<Sample>& samples, const std::vector<int>& indices,
                  std::vector<int>* labels) {
    if (indices.empty()) fail("make_batch: empty index list");
    const Tensor& first = samples[static_cast<size_t>(indices[0])].image;
    Tensor batch({static_cast<int>(indices.size()), first.dim(0), first.dim(1), first.dim(2)});
    if (labels) labels->clear();
    const std::int64_t stride = first.numel();
    for (size_t i = 0; i < indices.size(); ++i) {
        const Sample& s = samples[static_cast<size_t>(indices[i])];
        std::copy(s.image.data.begin(), s.image.data.end(),
                  batch.data.begin() + static_cast<std::ptrdiff_t>(i) * stride);
        if (labels) labels->push_back(s.label);
    }
    return batch;
}

BenchLookup BenchLookup::parse(const std::string& text) {
    BenchLookup lut;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(std::string("bench lookup: malformed JSON: ") + e.what());
    }
    if (!j.contains("entries") || !j["entries"].is_array()) fail("bench lookup: missing 'entries' array");
    for (const auto& je : j["entries"]) {
        if (!je.contains("genotype")) fail("bench lookup: entry without 'genotype'");
        std::map<std::string, double> rec;
        for (auto it = je.begin(); it != je.end(); ++it) {
            if (it.key() == "genotype") continue;
            const double v = it.value().get<double>();
            if (v < 0.0 || v > 100.0)
                fail("bench lookup: accuracy " + format_double(v) + " outside [0,100]");
            rec[it.key()] = v;
        }
        // canonicalize whatever serialization the file used
        const Genotype g = genotype_from_json(je["genotype"].get<std::string>());
        lut.entries[canonical_genotype_key(g)] = std::move(rec);
    }
    return lut;
}

BenchLookup BenchLookup::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("bench lookup: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text);
}

void BenchLookup::insert(const Genotype& g, const std::map<std::string, double>& record) {
    entries[canonical_genotype_key(g)] = record;
}

std::optional<std::map<std::string, double>> BenchLookup::query(const Genotype& g) const {
    auto it = entries.find(canonical_genotype_key(g));
    if (it == entries.end()) return std::nullopt;
    return it->second;
}

}  // namespace nd
