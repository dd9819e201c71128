#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nd/data.hpp"
#include "nd/noise.hpp"
#include "nd/supernet.hpp"

namespace nd {

struct SymMatrix {
    int n = 0;
    std::vector<double> a;  // row-major n*n

    SymMatrix() = default;
    explicit SymMatrix(int n) : n(n), a(static_cast<size_t>(n) * n, 0.0) {}
    double& at(int i, int j) { return a[static_cast<size_t>(i) * n + j]; }
    double at(int i, int j) const { return a[static_cast<size_t>(i) * n + j]; }
};

// Per-epoch maximal Hessian eigenvalues plus their trailing moving average.
struct HessianTrace {
    std::vector<double> raw;
    int window = 5;

    std::vector<double> smoothed() const;
    std::string to_csv() const;  // epoch,lambda_max,lambda_max_smoothed
};

struct ValBatch {
    Tensor images;
    std::vector<int> labels;
};
ValBatch make_val_batch(const std::vector<Sample>& samples, int max_samples);

enum class DiagLoss { CrossEntropy, LinearReadout };

struct DiagOptions {
    DiagLoss loss = DiagLoss::CrossEntropy;
    std::uint64_t readout_seed = 2024;  // fixed coefficients of the linear readout
    int batch_size = 64;
};

// Validation loss and its flat alpha gradient with noise disabled and no
// state mutation (frozen batch statistics).
struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};
LossGrad val_loss_grad(Supernet& net, const std::vector<Sample>& valset, const DiagOptions& opt);

// Central differences of a gradient functional, symmetrized.
using GradFn = std::function<std::vector<double>(const std::vector<double>&)>;
SymMatrix fd_hessian_from_gradients(const GradFn& grad_fn, const std::vector<double>& center, double h);

// Central-difference Hessian of the validation loss w.r.t. the flat alpha
// vector, built from analytic gradients and symmetrized.
SymMatrix alpha_hessian(Supernet& net, const std::vector<Sample>& valset, double h = 1e-3,
                        const DiagOptions& opt = {});

// Largest algebraic eigenvalue via shift-guaranteed power iteration.
double max_eigenvalue(const SymMatrix& H, double tol = 1e-8, int max_iter = 10000);

struct LandscapeGrid {
    std::vector<double> dir_x, dir_y;  // unit norm, mutually orthogonal
    double step = 0.0;
    int radius = 0;
    std::vector<double> accuracy;  // (2r+1)^2, row i = x offset, col j = y offset
    std::vector<double> loss;

    double acc_at(int i, int j) const;  // i,j in [-radius, radius]
    std::string to_csv() const;
};

struct LandscapeOptions {
    int radius = 5;
    double step = 0.1;
    bool random_directions = false;  // orthogonalized gradient pair otherwise
    std::uint64_t seed = 7;
    DiagOptions diag;
};

// Evaluates (loss, accuracy) over the centered grid spanned by two unit
// directions; the generic core behind landscape_scan.
using PointEval = std::function<std::pair<double, double>(const std::vector<double>&)>;  // loss, acc
LandscapeGrid scan_grid(const PointEval& eval, const std::vector<double>& center,
                        std::vector<double> dir_x, std::vector<double> dir_y, double step, int radius);

LandscapeGrid landscape_scan(Supernet& net, const std::vector<Sample>& valset,
                             const LandscapeOptions& opt);

struct UnbiasednessReport {
    int draws = 0;
    std::vector<double> noiseless_grad;
    std::vector<double> mean_grad;
    std::vector<double> std_error;
    std::vector<double> z_score;
    double max_abs_z = 0.0;
    // biased policies: per-coordinate first-order prediction of the shift
    std::vector<double> predicted_shift;
    std::vector<double> measured_shift;
    double max_prediction_z = 0.0;  // |measured - predicted| / SE

    std::string to_json() const;
};

// Monte-Carlo check of the gradient expectation under OFS noise at fixed
// (w, alpha): per-coordinate mean, standard error and z-score against the
// noiseless gradient; for biased policies also the predicted shift computed
// from the loss sensitivity at the noiseless output.
UnbiasednessReport verify_unbiasedness(Supernet& net, const NoisePolicy& policy, const ValBatch& batch,
                                       int n_draws, std::uint64_t seed, const DiagOptions& opt = {});

// Loss as a function of the injected noise vector z; the oracle test cases
// implement this directly, the supernet adapter routes z into OFS sites.
class NoisyLossFn {
public:
    virtual ~NoisyLossFn() = default;
    virtual int z_dim() const = 0;
    virtual double eval(const std::vector<double>& z) = 0;
    virtual double beta_estimate() { return 0.0; }
};

struct SmoothingReport {
    int draws = 0;
    int z_dim = 0;
    double sigma = 0.0;
    double mc_mean = 0.0;
    double mc_se = 0.0;
    double loss_at_zero = 0.0;
    double fd_trace = 0.0;
    double predicted_gap = 0.0;  // sigma^2/2 * trace
    double ratio = 0.0;          // (mc_mean - loss_at_zero) / predicted_gap
    double ratio_se = 0.0;
    double beta = 0.0;
    bool inconclusive = false;

    std::string to_json() const;
};

// Second-order smoothing check: Monte-Carlo mean of L over z against
// L(0) + sigma^2/2 * Tr(d2L/dz2), the trace taken by loss-only central
// second differences. Draws are antithetic pairs.
SmoothingReport verify_smoothing(NoisyLossFn& fn, double sigma, int n_draws, std::uint64_t seed,
                                 double fd_h = 1e-3);

// Adapter: z enters additively at every OFS skip site of the supernet.
class SupernetNoisyLoss : public NoisyLossFn {
public:
    SupernetNoisyLoss(Supernet& net, const ValBatch& batch, const DiagOptions& opt = {});
    int z_dim() const override;
    double eval(const std::vector<double>& z) override;
    double beta_estimate() override;
    double skip_output_rms();  // over the noiseless forward

private:
    Supernet& net_;
    const ValBatch& batch_;
    DiagOptions opt_;
    int z_dim_ = 0;
    std::vector<int> site_sizes_;
};

struct FeatureHistogram {
    std::string site;  // cellNN/group/eNN
    std::vector<double> bin_edges;        // bins+1 entries
    std::vector<std::int64_t> counts;     // bins entries
    std::int64_t total = 0;
    double mean = 0.0, stddev = 0.0, skewness = 0.0, excess_kurtosis = 0.0;
};

// Output-feature histograms of one candidate op at every edge carrying it.
std::vector<FeatureHistogram> feature_histogram(Supernet& net, const std::vector<Sample>& data,
                                                const std::string& op_name, int bins = 64,
                                                int batch_size = 64);

void moments(const std::vector<double>& xs, double* mean, double* stddev, double* skewness,
             double* excess_kurtosis);

std::string histograms_to_json(const std::vector<FeatureHistogram>& hists);

}  // namespace nd
