// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Eigenvalues>

#include "cart/adaptation.hpp"
#include "cart/error.hpp"
#include "cart/interference.hpp"
#include "cart/merge_engine.hpp"
#include "cart/origin_solver.hpp"
#include "cart/rng.hpp"
#include "cart/theorem_lab.hpp"

using namespace cart;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool ok;
    std::string detail;
};

std::string num(double x) {
    std::ostringstream s;
    s << x;
    return s.str();
}

double max_abs_diff(const TensorMap &a, const TensorMap &b) {
    double worst = 0.0;
    for (const auto &[name, t] : a.entries) {
        const auto &u = b.entries.at(name);
        for (std::size_t i = 0; i < t.values.size(); ++i) worst = std::max(worst, std::abs(t.values[i] - u.values[i]));
    }
    return worst;
}

// Pretrained checkpoint plus `tasks` perturbed copies. With `with_vectors`
// each checkpoint also carries a bias and a 1 x n row.
std::vector<TensorMap> toy_family(std::uint64_t seed, int tasks, TensorMap &pretrained, bool with_vectors = true) {
    Rng rng(seed, "acceptance.toy");
    auto draw = [&](double scale) {
        TensorMap m;
        m.entries["enc.weight"] = from_matrix(scale * rng.gaussian(8, 6));
        m.entries["dec.weight"] = from_matrix(scale * rng.gaussian(5, 8));
        if (with_vectors) {
            m.entries["enc.bias"] = from_matrix(scale * rng.gaussian(1, 6));
            const Matrix v = scale * rng.gaussian(4, 1);
            m.entries["norm"] = DenseTensor({4}, DType::F64, std::vector<double>(v.data(), v.data() + 4));
        }
        return m;
    };
    pretrained = draw(1.0);
    std::vector<TensorMap> out;
    for (int t = 0; t < tasks; ++t) {
        TensorMap ft = pretrained;
        const TensorMap d = draw(0.5);
        for (auto &[name, tensor] : ft.entries)
            for (std::size_t i = 0; i < tensor.values.size(); ++i) tensor.values[i] += d.entries.at(name).values[i];
        out.push_back(std::move(ft));
    }
    return out;
}

Outcome centering_identity() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TensorMap pre;
        const auto fam = toy_family(seed, 3, pre);
        const auto reference = cart_merge(pre, fam, 1.0, 0.0);
        for (double lambda : {0.0, 0.3, 1.0, 3.0}) worst = std::max(worst, max_abs_diff(cart_merge(pre, fam, 1.0, lambda), reference));
    }
    return {worst < 1e-9, "max |diff| across lambda = " + num(worst)};
}

Outcome endpoint_collapse() {
    double worst = 0.0, pretrained_gap = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TensorMap pre;
        const auto fam = toy_family(seed, 3, pre);
        const auto avg = weight_average(fam);
        for (double lambda : {0.3, 1.0})
            for (double ratio : {0.0, 1.0}) worst = std::max(worst, max_abs_diff(cart_merge(pre, fam, ratio, lambda), avg));

        // Every tensor is a Matrix here, so the whole checkpoint must reproduce the pretrained one.
        TensorMap pre_m;
        const auto fam_m = toy_family(seed, 3, pre_m, false);
        MergePlan plan;
        plan.origin_mode = OriginMode::pretrained();
        plan.rank_ratio = 0.0;
        plan.coefficients = 1.0;
        const auto origin = select_origin(plan.origin_mode, pre_m, fam_m);
        const auto merged = merge(prune_ranks(build_task_vectors(origin.origin, fam_m), 0.0), plan);
        if (!(merged == pre_m)) pretrained_gap = std::max(pretrained_gap, std::max(1e-300, max_abs_diff(merged, pre_m)));
    }
    std::ostringstream s;
    s << "CART vs average " << worst << ", pretrained-origin rank 0 gap " << pretrained_gap;
    return {worst < 1e-6 && pretrained_gap == 0.0, s.str()};
}

Outcome eckart_young() {
    Rng rng(0, "acceptance.eckart_young");
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto m = 2 + static_cast<Eigen::Index>(rng.uniform(0, 63));
        const auto n = 2 + static_cast<Eigen::Index>(rng.uniform(0, 47));
        const Matrix a = rng.gaussian(m, n);
        const auto f = svd(a);
        const auto k = static_cast<Eigen::Index>(rng.uniform(0, static_cast<double>(f.rank())));
        const double residual = (a - reconstruct(truncate(f, k))).squaredNorm();
        // Tail energy from the eigenvalues of the Gram matrix.
        const Matrix gram = m >= n ? Matrix(a.transpose() * a) : Matrix(a * a.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
        Vector ev = eig.eigenvalues(); // ascending
        const double tail = ev.head(ev.size() - k).sum();
        worst = std::max(worst, std::abs(residual - tail) / tail);
    }
    return {worst < 1e-8, "max relative error " + num(worst)};
}

Outcome simmin_optimality() {
    Rng rng(0, "acceptance.simmin");
    double worst_grad = 0.0;
    int decreases = 0;
    for (int inst = 0; inst < 5; ++inst) {
        std::vector<Matrix> layers;
        for (int t = 0; t < 4; ++t) layers.push_back(rng.gaussian(6, 5) * (1.0 + inst));
        double scale = 0.0;
        for (const auto &l : layers) scale += l.norm();
        const Matrix mean = mean_origin(layers);
        const double base = simmin_objective(mean, layers);
        const double h = 1e-3;
        for (Eigen::Index i = 0; i < mean.size(); ++i) {
            Matrix plus = mean, minus = mean;
            plus(i) += h;
            minus(i) -= h;
            const double g = (simmin_objective(plus, layers) - simmin_objective(minus, layers)) / (2 * h);
            worst_grad = std::max(worst_grad, std::abs(g) / scale);
        }
        for (int p = 0; p < 100 / 5; ++p) {
            const Matrix other = mean + rng.uniform(1e-3, 1.0) * rng.gaussian(6, 5);
            if (simmin_objective(other, layers) < base) ++decreases;
        }
    }
    std::ostringstream s;
    s << "max |grad|/scale " << worst_grad << ", decreasing perturbations " << decreases << "/100";
    return {worst_grad < 1e-6 && decreases == 0, s.str()};
}

Outcome rankmin_descent() {
    double worst_drop = 1.0;
    int fip_up = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, "acceptance.rankmin");
        const Matrix pre = rng.gaussian(12, 10);
        const Matrix shared = 2.0 * rng.gaussian(12, 2) * rng.gaussian(2, 10) / std::sqrt(60.0);
        std::vector<Matrix> layers;
        for (int t = 0; t < 4; ++t) layers.push_back(pre + shared + rng.gaussian(12, 1) * rng.gaussian(1, 10) / std::sqrt(120.0));
        const auto res = rankmin_origin(layers, 200);
        worst_drop = std::min(worst_drop, 1.0 - res.best_objective / res.initial_objective);
        if (fip_abs_sum(res.origin, layers) > fip_abs_sum(mean_origin(layers), layers) + 1e-12) ++fip_up;
    }
    std::ostringstream s;
    s << "smallest objective decrease " << 100.0 * worst_drop << "%, FIP increases " << fip_up << "/20";
    return {worst_drop >= 0.10 && fip_up == 0, s.str()};
}

// Independent per-sample evaluation of the output gap.
double oracle_L(const SyntheticTaskSuite &s) {
    double total = 0.0;
    for (std::size_t t = 0; t < s.taus.size(); ++t)
        for (const auto &x : s.inputs[t]) {
            Vector gap = Vector::Zero(s.params.d);
            for (std::size_t u = 0; u < s.taus.size(); ++u)
                if (u != t) gap += s.taus[u] * x;
            total += gap.squaredNorm();
        }
    return total;
}

Outcome certification() {
    int violations = 0;
    double worst_ratio = 0.0, worst_oracle = 0.0;
    for (std::uint64_t i = 0; i < 1000; ++i) {
        const std::uint64_t seed = stream_seed(0, "certify." + std::to_string(i));
        const auto suite = generate_suite(sample_suite_params({}, seed), seed);
        const auto cert = certify_bound(suite);
        if (!cert.holds) ++violations;
        worst_ratio = std::max(worst_ratio, cert.L_value / cert.bound_value);
        if (i < 50) {
            const double o = oracle_L(suite);
            worst_oracle = std::max(worst_oracle, std::abs(cert.L_value - o) / std::max(o, 1e-300));
        }
    }
    std::ostringstream s;
    s << "violations " << violations << "/1000, max L/bound " << worst_ratio << ", oracle rel error " << worst_oracle;
    return {violations == 0 && worst_oracle < 1e-9, s.str()};
}

Outcome interference_ordering() {
    int held = 0, cells = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto suite = make_shared_component_suite({}, seed);
        std::vector<Matrix> thetas;
        for (const auto &f : suite.finetuned) thetas.push_back(to_matrix(f.entries.at("layer.weight")));
        const Matrix pre = to_matrix(suite.pretrained.entries.at("layer.weight"));
        const Matrix avg = mean_origin(thetas);
        std::vector<Matrix> centered, plain;
        for (const auto &t : thetas) {
            centered.push_back(t - avg);
            plain.push_back(t - pre);
        }
        std::vector<Eigen::Index> ks;
        for (Eigen::Index k = 1; k <= std::min(pre.rows(), pre.cols()); ++k) ks.push_back(k);
        const auto ic = row_space_interference_curve(centered, ks);
        const auto ip = row_space_interference_curve(plain, ks);
        for (std::size_t i = 0; i < ks.size(); ++i) {
            ++cells;
            if (ic[i] <= ip[i]) ++held;
        }
    }
    const double frac = static_cast<double>(held) / cells;
    return {frac >= 0.95, std::to_string(held) + "/" + std::to_string(cells) + " cells with centered I(k) <= pretrained I(k)"};
}

Outcome bell_curve() {
    const auto suite = make_classification_suite({}, 0);
    const std::vector<double> lambdas{1.0};
    const auto table = rank_sweep(suite.pretrained, suite.finetuned, suite.evaluator(), lambdas, kDefaultSweepRatios,
                                  OriginMode::mean());
    const double left = table.rows.front().mean_accuracy, right = table.rows.back().mean_accuracy;
    double best = -1.0, best_ratio = 0.0;
    for (std::size_t i = 1; i + 1 < table.rows.size(); ++i)
        if (table.rows[i].mean_accuracy > best) {
            best = table.rows[i].mean_accuracy;
            best_ratio = table.rows[i].ratio;
        }
    std::ostringstream s;
    s << "ratio 0: " << left << ", best interior " << best << " at ratio " << best_ratio << ", ratio 1: " << right;
    return {best - left >= 0.02 && best - right >= 0.02, s.str()};
}

Outcome reconstruction_laws() {
    bool monotone = true, spectral = true, zero = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto suite = make_shared_component_suite({}, seed);
        const auto avg = weight_average(suite.finetuned);
        const auto report = analyze_interference(avg, suite.finetuned, "mean");
        const auto &layer = report.layers.at(0);
        std::vector<Matrix> thetas;
        for (const auto &f : suite.finetuned) thetas.push_back(to_matrix(f.entries.at("layer.weight")));
        const Matrix origin = to_matrix(avg.entries.at("layer.weight"));
        double total = 0.0;
        for (const auto &t : thetas) total += (t - origin).squaredNorm();
        for (std::size_t i = 0; i < layer.reconstruction.size(); ++i) {
            const auto [k, r] = layer.reconstruction[i];
            if (i > 0 && r > layer.reconstruction[i - 1].second * (1 + 1e-12)) monotone = false;
            double tail = 0.0;
            for (const auto &t : thetas) {
                Eigen::SelfAdjointEigenSolver<Matrix> eig((t - origin).transpose() * (t - origin));
                const Vector ev = eig.eigenvalues();
                tail += ev.head(ev.size() - k).cwiseMax(0.0).sum();
            }
            if (std::abs(r - tail) > 1e-9 * total) spectral = false;
            if (std::abs(reconstruction_error(thetas, origin, k) - r) > 1e-12 * total) spectral = false;
        }
        if (layer.reconstruction.back().second > 1e-8 * total) zero = false;
    }
    return {monotone && spectral && zero, std::string("monotone ") + (monotone ? "yes" : "no") + ", tail sums " +
                                              (spectral ? "match" : "differ") + ", full rank " + (zero ? "zero" : "nonzero")};
}

Outcome entropy_tta() {
    double worst_fd = 0.0;
    int instances = 0;
    for (std::uint64_t seed = 0; instances < 20; ++seed, ++instances) {
        SignalNoiseParams p;
        p.samples_per_class = 8;
        const auto suite = make_signal_noise_suite(p, seed);
        const auto tvs = prune_ranks(build_task_vectors(suite.pretrained, suite.finetuned), seed % 2 ? 0.5 : 1.0);
        Rng rng(seed, "acceptance.tta");
        auto table = CoefficientTable::filled(tvs.task_count(), tvs.layers, 0.0);
        for (Eigen::Index i = 0; i < table.values.size(); ++i) table.values(i) = rng.uniform(0.0, 1.5);
        const Matrix g = coefficient_gradient(table, tvs, suite.model, suite.test);
        const double h = 1e-6;
        for (Eigen::Index i = 0; i < table.values.size(); ++i) {
            auto plus = table, minus = table;
            plus.values(i) += h;
            minus.values(i) -= h;
            const double fd = (entropy_loss(suite.model, merged_params(tvs, plus), suite.test) -
                               entropy_loss(suite.model, merged_params(tvs, minus), suite.test)) / (2 * h);
            worst_fd = std::max(worst_fd, std::abs(g(i) - fd) / std::max(1e-8, std::max(std::abs(g(i)), std::abs(fd))));
        }
    }

    const auto suite = make_signal_noise_suite({}, 0);
    const auto tvs = build_task_vectors(suite.pretrained, suite.finetuned);
    const auto res = adapt_coefficients(tvs, suite.model, suite.test, {0.1, 100, 0.3});
    const double signal = res.table.values.row(0).mean(), noise = res.table.values.row(1).mean();
    const double h0 = res.log.front().entropy, h1 = res.log.back().entropy;
    std::ostringstream s;
    s << "gradient rel error " << worst_fd << ", entropy " << h0 << " -> " << h1 << ", mean lambda signal " << signal
      << " vs noise " << noise;
    return {worst_fd < 1e-4 && h1 <= h0 && signal > noise, s.str()};
}

Outcome ste_contract() {
    Rng rng(0, "acceptance.ste");
    bool forward = true;
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Vector s = rng.gaussian(8).cwiseAbs();
        const Vector a = 4.0 * rng.gaussian(8);
        const auto out = ste_masked_singulars(s, a);
        const double h = 1e-6;
        for (Eigen::Index i = 0; i < 8; ++i) {
            const double soft = 1.0 / (1.0 + std::exp(-a(i)));
            if (out.value(i) != (soft > 0.5 ? s(i) : 0.0)) forward = false;
            auto soft_path = [&](double ai) { return s(i) / (1.0 + std::exp(-ai)); };
            const double fd = (soft_path(a(i) + h) - soft_path(a(i) - h)) / (2 * h);
            worst = std::max(worst, std::abs(out.derivative(i) - fd));
        }
    }
    return {forward && worst < 1e-4,
            std::string("forward ") + (forward ? "hard-masked" : "MISMATCH") + ", derivative max error " + num(worst)};
}

Outcome sample_size_law() {
    const auto m = sample_size(0.0, 1.0, 0.05, 1.96);
    bool laws = true;
    for (double eps : {0.01, 0.02, 0.05, 0.1}) {
        const auto base = sample_size(0.0, 1.0, eps);
        // Doubling the range or halving the margin needs about four times the samples.
        if (std::abs(static_cast<double>(sample_size(0.0, 2.0, eps)) - 4.0 * static_cast<double>(base)) > 4.0) laws = false;
        if (std::abs(static_cast<double>(sample_size(0.0, 1.0, eps / 2)) - 4.0 * static_cast<double>(base)) > 4.0) laws = false;
        if (sample_size(0.0, 1.0, eps) != sample_size(5.0, 6.0, eps)) laws = false;
        if (sample_size(0.0, 1.0, eps, 2.576) < base) laws = false;
    }
    return {m == 385 && laws, "m = " + std::to_string(m) + ", scaling laws " + (laws ? "hold" : "broken")};
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism(const std::string &cli) {
    const fs::path root = fs::temp_directory_path() / ("cart_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    auto run = [&](const std::string &dir, const std::string &args) {
        const std::string cmd = cli + " --seed 7 --out-dir " + (root / dir).string() + " " + args + " > /dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    };
    const int codes = run("a", "sweep") + run("b", "sweep") + run("a", "certify --count 200") + run("b", "certify --count 200");
    bool same = codes == 0;
    std::string detail = codes == 0 ? "" : "a CLI run failed; ";
    for (const char *file : {"sweep.csv", "sweep.json", "certificates.jsonl"}) {
        const auto a = slurp(root / "a" / file), b = slurp(root / "b" / file);
        if (a.empty() || a != b) {
            same = false;
            detail += std::string(file) + " differs; ";
        }
    }
    fs::remove_all(root);
    return {same, same ? "sweep.csv, sweep.json, certificates.jsonl byte-identical" : detail};
}

} // namespace

int main() {
    struct Criterion {
        int id;
        std::string name;
        double budget_s;
        std::function<Outcome()> check;
    };
    const std::string cli = CART_CLI_PATH;
    const std::vector<Criterion> criteria{
        {1, "centering identity", 1, centering_identity},
        {2, "endpoint collapse", 1, endpoint_collapse},
        {3, "Eckart-Young residual", 5, eckart_young},
        {4, "SimMin optimality of the mean", 5, simmin_optimality},
        {5, "RankMin descent", 30, rankmin_descent},
        {6, "interference bound certification", 60, certification},
        {7, "interference ordering", 30, interference_ordering},
        {8, "bell curve over rank", 60, bell_curve},
        {9, "reconstruction error laws", 5, reconstruction_laws},
        {10, "entropy test-time adaptation", 60, entropy_tta},
        {11, "STE mask contract", 5, ste_contract},
        {12, "sample-size calculator", 1, sample_size_law},
        {13, "determinism of sweep and certify", 60, [&] { return determinism(cli); }},
    };

    int failed = 0;
    for (const auto &c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.check();
        } catch (const std::exception &e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool pass = out.ok && secs < c.budget_s;
        if (!pass) ++failed;
        std::printf("[%s] %2d %-34s %7.3fs / %4.0fs  %s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs, c.budget_s,
                    out.detail.c_str());
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed == 0 ? 0 : 1;
}
