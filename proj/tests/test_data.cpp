#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "nd/data.hpp"
#include "nd/rng.hpp"

using namespace nd;

namespace {

std::string temp_path(const std::string& name) { return "/tmp/nd_test_" + name; }

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void be32_push(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

}  // namespace

TEST_CASE("synthetic 2-class 100-sample pool splits 50/50") {
    SyntheticOptions opt;
    opt.classes = 2;
    opt.samples = 100;
    opt.test_samples = 20;
    opt.image_size = 8;
    DatasetSplit ds = load_synthetic(opt);
    CHECK(ds.train.size() == 50);
    CHECK(ds.val.size() == 50);
    CHECK(ds.test.size() == 20);
    for (const auto& s : ds.train) CHECK(s.label < 2);
}

TEST_CASE("synthetic loading is deterministic in the seed") {
    SyntheticOptions opt;
    opt.classes = 3;
    opt.samples = 30;
    opt.test_samples = 9;
    opt.image_size = 8;
    opt.seed = 123;
    DatasetSplit a = load_synthetic(opt);
    DatasetSplit b = load_synthetic(opt);
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].label == b.train[i].label);
        CHECK(a.train[i].image.data == b.train[i].image.data);
    }
    opt.seed = 124;
    DatasetSplit c = load_synthetic(opt);
    bool same_order = true;
    for (size_t i = 0; i < a.train.size() && same_order; ++i)
        same_order = a.train[i].label == c.train[i].label;
    CHECK_FALSE(same_order);
}

TEST_CASE("cifar-10 binary record round trip") {
    std::vector<unsigned char> rec(3073);
    rec[0] = 7;
    for (int i = 0; i < 3072; ++i) rec[static_cast<size_t>(i) + 1] = static_cast<unsigned char>((i * 37) % 256);
    // pool needs at least 2 records to split; duplicate it
    std::vector<unsigned char> file = rec;
    file.insert(file.end(), rec.begin(), rec.end());
    const std::string path = temp_path("cifar.bin");
    write_bytes(path, file);

    CifarOptions opt;
    opt.train_files = {path};
    DatasetSplit ds = load_cifar10(opt);
    REQUIRE(ds.train.size() == 1);
    REQUIRE(ds.val.size() == 1);
    CHECK(ds.train[0].label == 7);
    const Tensor raw = denormalize_image(ds.train[0].image, ds.channel_mean, ds.channel_std);
    for (int i = 0; i < 3072; ++i)
        CHECK(raw.at(i) == doctest::Approx(((i * 37) % 256) / 255.0).epsilon(1e-12));
}

TEST_CASE("cifar loader reports truncation with byte offset") {
    const std::string path = temp_path("cifar_trunc.bin");
    write_bytes(path, std::vector<unsigned char>(3073 + 100, 0));
    CifarOptions opt;
    opt.train_files = {path};
    try {
        load_cifar10(opt);
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("3173") != std::string::npos);
    }
}

TEST_CASE("cifar loader rejects out-of-range labels") {
    std::vector<unsigned char> file(2 * 3073, 0);
    file[0] = 11;
    const std::string path = temp_path("cifar_badlabel.bin");
    write_bytes(path, file);
    CifarOptions opt;
    opt.train_files = {path};
    CHECK_THROWS_AS(load_cifar10(opt), std::runtime_error);
}

TEST_CASE("idx pair round trip with magic and truncation checks") {
    std::vector<unsigned char> img, lbl;
    be32_push(img, 0x00000803u);
    be32_push(img, 4);  // 4 samples
    be32_push(img, 4);
    be32_push(img, 4);
    for (int i = 0; i < 4 * 16; ++i) img.push_back(static_cast<unsigned char>(i));
    be32_push(lbl, 0x00000801u);
    be32_push(lbl, 4);
    for (unsigned char v : {0, 1, 2, 3}) lbl.push_back(v);
    write_bytes(temp_path("tr.idx"), img);
    write_bytes(temp_path("trl.idx"), lbl);

    IdxOptions opt;
    opt.train_images = temp_path("tr.idx");
    opt.train_labels = temp_path("trl.idx");
    opt.num_classes = 4;
    DatasetSplit ds = load_idx(opt);
    CHECK(ds.train.size() + ds.val.size() == 4);
    CHECK(ds.channels == 1);
    CHECK(ds.image_size == 4);

    img.resize(img.size() - 5);  // truncate
    write_bytes(temp_path("tr_bad.idx"), img);
    opt.train_images = temp_path("tr_bad.idx");
    try {
        load_idx(opt);
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
}

TEST_CASE("seeded shuffle matches an independent Fisher-Yates replay") {
    CounterRng rng(derive_seed(42, "data.shuffle"));
    std::vector<int> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    rng.shuffle(idx);

    // independent reimplementation from the documented algorithm: iterate i
    // from n-1 down to 1, draw j in [0,i] via rejection on mix3, swap
    std::vector<int> ref{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::uint64_t seed = derive_seed(42, "data.shuffle");
    std::uint64_t counter = 0;
    for (size_t i = ref.size(); i > 1; --i) {
        const std::uint64_t n = i;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        const std::uint64_t draw_index = counter++;
        std::uint64_t elem = 0, r;
        do {
            r = mix3(seed, draw_index, elem++);
        } while (r >= limit);
        std::swap(ref[i - 1], ref[static_cast<size_t>(r % n)]);
    }
    CHECK(idx == ref);
}

TEST_CASE("subset keeps exact class balance and reports shortfalls") {
    SyntheticOptions opt;
    opt.classes = 4;
    opt.samples = 80;
    opt.test_samples = 40;
    opt.image_size = 8;
    DatasetSplit ds = load_synthetic(opt);
    DatasetSplit small = subset(ds, 5, 8);
    for (const auto& part : {small.train, small.val, small.test}) {
        std::vector<int> counts(4, 0);
        for (const auto& s : part) ++counts[static_cast<size_t>(s.label)];
        for (int c : counts) CHECK(c == 5);
    }
    try {
        subset(ds, 1000, 8);
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("class") != std::string::npos);
    }
}

TEST_CASE("full-count subset preserves membership") {
    SyntheticOptions opt;
    opt.classes = 2;
    opt.samples = 20;
    opt.test_samples = 8;
    opt.image_size = 8;
    DatasetSplit ds = load_synthetic(opt);
    std::vector<int> counts(2, 0);
    for (const auto& s : ds.train) ++counts[static_cast<size_t>(s.label)];
    const int per = std::min(counts[0], counts[1]);
    DatasetSplit same = subset(ds, per, 8);
    CHECK(same.train.size() == static_cast<size_t>(2 * per));
}

TEST_CASE("checkerboard area downscale gives exact 0.5") {
    Tensor img({1, 32, 32});
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) img.data[static_cast<size_t>(y * 32 + x)] = (x + y) % 2 ? 1.0 : 0.0;
    Tensor small = area_downscale(img, 16);
    for (double v : small.data) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));

    Tensor flat = Tensor::full({3, 32, 32}, 0.37);
    Tensor fs = area_downscale(flat, 16);
    for (double v : fs.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("normalization round trip is exact to 1e-12") {
    CounterRng rng(5);
    Tensor img = rng.uniform_tensor({3, 6, 6}, 0.0, 1.0);
    std::vector<double> mean{0.4, 0.5, 0.6}, stddev{0.2, 0.25, 0.3};
    Tensor back = denormalize_image(normalize_image(img, mean, stddev), mean, stddev);
    for (std::int64_t i = 0; i < img.numel(); ++i)
        CHECK(back.at(i) == doctest::Approx(img.at(i)).epsilon(1e-12));
}

TEST_CASE("bench lookup: absent, round trip, canonicalization, validation") {
    BenchLookup lut;
    Genotype g;
    g.space = "nasbench201";
    g.rule = "nb201-argmax";
    g.edges = {{0, 1, "skip_connect", ""}, {0, 2, "none", ""}};
    CHECK_FALSE(lut.query(g).has_value());

    lut.insert(g, {{"cifar10_valid", 91.5}, {"cifar10_test", 91.0}});
    auto rec = lut.query(g);
    REQUIRE(rec.has_value());
    CHECK(rec->at("cifar10_valid") == 91.5);

    // a JSON file with scrambled key order maps to the same key
    const std::string text = R"({"entries":[{"genotype":
      "{\"edges\":[{\"op\":\"skip_connect\",\"to\":1,\"from\":0},{\"from\":0,\"to\":2,\"op\":\"none\"}],\"rule\":\"nb201-argmax\",\"space\":\"nasbench201\"}",
      "cifar10_valid": 77.25}]})";
    BenchLookup parsed = BenchLookup::parse(text);
    auto rec2 = parsed.query(g);
    REQUIRE(rec2.has_value());
    CHECK(rec2->at("cifar10_valid") == 77.25);

    CHECK_THROWS_AS(BenchLookup::parse("{nope"), std::runtime_error);
    CHECK_THROWS_AS(BenchLookup::parse(R"({"entries":[{"genotype":"{\"space\":\"s\",\"rule\":\"r\",\"edges\":[]}","x":101.0}]})"),
                    std::runtime_error);
}
