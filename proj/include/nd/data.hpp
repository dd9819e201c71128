#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nd/searchspace.hpp"
#include "nd/tensor.hpp"

namespace nd {

struct Sample {
    Tensor image;  // (C,H,W), normalized
    int label = 0;
};

struct DatasetSplit {
    std::vector<Sample> train, val, test;
    int num_classes = 0;
    int channels = 0;
    int image_size = 0;
    std::vector<double> channel_mean, channel_std;

    const std::vector<Sample>& part(const std::string& name) const;
};

struct SyntheticOptions {
    int classes = 10;
    int samples = 1000;       // training pool; split 50/50 into train/val
    int test_samples = 1000;  // held-out test set
    int image_size = 16;
    int channels = 3;
    std::uint64_t seed = 0;
    int blobs_per_class = 3;
    double pattern_amplitude = 0.35;
    double pixel_noise = 0.15;
};

struct IdxOptions {
    std::string train_images, train_labels;
    std::string test_images, test_labels;
    int num_classes = 10;
    std::uint64_t seed = 0;
};

struct CifarOptions {
    std::vector<std::string> train_files;
    std::string test_file;
    std::uint64_t seed = 0;
};

// Class prototypes are sums of random Gaussian bumps with per-channel means
// matched across classes, so classes are separable by spatial layout rather
// than raw channel statistics.
DatasetSplit load_synthetic(const SyntheticOptions& opt);
DatasetSplit load_idx(const IdxOptions& opt);
DatasetSplit load_cifar10(const CifarOptions& opt);

// Class-balanced subsample of each part plus optional area-average resize.
DatasetSplit subset(const DatasetSplit& split, int per_class, int image_size);

// Box-overlap area average from (C,Hin,Win) to (C,out,out).
Tensor area_downscale(const Tensor& chw, int out_size);

Tensor normalize_image(const Tensor& chw, const std::vector<double>& mean, const std::vector<double>& std);
Tensor denormalize_image(const Tensor& chw, const std::vector<double>& mean, const std::vector<double>& std);

// Stacks samples[indices] into a (B,C,H,W) batch.
Tensor make_batch(const std::vector<Sample>& samples, const std::vector<int>& indices,
                  std::vector<int>* labels);

// Optional table of known evaluations keyed by canonical genotype strings.
struct BenchLookup {
    std::map<std::string, std::map<std::string, double>> entries;

    static BenchLookup load_file(const std::string& path);
    static BenchLookup parse(const std::string& text);
    void insert(const Genotype& g, const std::map<std::string, double>& record);
    std::optional<std::map<std::string, double>> query(const Genotype& g) const;
};

}  // namespace nd
