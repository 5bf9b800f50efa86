// cart: command-line front end for merging, indexing, analysis and the
// synthetic experiments (sweep, certify, adapt, samplesize).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "cart/adaptation.hpp"
#include "cart/error.hpp"
#include "cart/interference.hpp"
#include "cart/merge_engine.hpp"
#include "cart/origin_solver.hpp"
#include "cart/rng.hpp"
#include "cart/tensor_store.hpp"
#include "cart/theorem_lab.hpp"
#include "json_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char *kVersion = "0.1.0";

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    std::vector<std::string> matrix_include;
    std::vector<std::string> matrix_exclude;

    cart::ClassOverrides overrides() const { return {matrix_include, matrix_exclude}; }
    fs::path out(const std::string &name) const { return fs::path(out_dir) / name; }
};

std::string sha256_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw cart::Error(cart::ErrorCode::Io, "cannot open " + path.string());
    EVP_MD_CTX *ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw cart::Error(cart::ErrorCode::Io, "cannot write " + path.string());
    out << text;
    if (!out) throw cart::Error(cart::ErrorCode::Io, "write failed for " + path.string());
}

void prepare_out_dir(const Common &common) {
    std::error_code ec;
    fs::create_directories(common.out_dir, ec);
    if (ec) throw cart::Error(cart::ErrorCode::Io, "cannot create " + common.out_dir + ": " + ec.message());
}

std::vector<cart::TensorMap> load_all(const std::vector<std::string> &paths) {
    std::vector<cart::TensorMap> maps;
    maps.reserve(paths.size());
    for (const auto &p : paths) maps.push_back(cart::load_checkpoint(p));
    return maps;
}

json input_hashes(const std::vector<std::string> &paths) {
    json out = json::array();
    for (const auto &p : paths) out.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    return out;
}

std::string layer_file_stem(std::string name) {
    for (auto &ch : name)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-' && ch != '_') ch = '_';
    return name;
}

// merge -------------------------------------------------------------------

struct MergeArgs {
    std::vector<std::string> checkpoints;
    std::string pretrained;
    std::string origin = "mean";
    double ratio = 0.08;
    double lambda = 1.0;
    std::string coefficients;
    int rankmin_steps = 200;
    std::optional<double> rankmin_step_size;
    std::string output = "merged.safetensors";
};

int run_merge(const MergeArgs &a, const Common &common) {
    if (a.checkpoints.size() < 2) throw UsageError("merge needs at least two --checkpoint paths");
    if (a.origin == "pretrained" && a.pretrained.empty()) throw UsageError("--origin pretrained needs --pretrained");
    prepare_out_dir(common);

    const auto finetuned = load_all(a.checkpoints);
    const cart::TensorMap pretrained = a.pretrained.empty() ? cart::TensorMap{} : cart::load_checkpoint(a.pretrained);

    cart::MergePlan plan;
    plan.origin_mode = cart::OriginMode::parse(a.origin, a.rankmin_steps, a.rankmin_step_size);
    plan.rank_ratio = a.ratio;
    if (!a.coefficients.empty()) {
        std::ifstream in(a.coefficients);
        if (!in) throw cart::Error(cart::ErrorCode::Io, "cannot open " + a.coefficients);
        json j;
        try {
            in >> j;
        } catch (const json::exception &e) {
            throw cart::Error(cart::ErrorCode::Plan, std::string("coefficient file is not JSON: ") + e.what());
        }
        plan.coefficients = cart::CoefficientTable::from_json(j);
    } else {
        plan.coefficients = a.lambda;
    }
    plan.validate();

    const auto overrides = common.overrides();
    const auto origin = cart::select_origin(plan.origin_mode, pretrained, finetuned, overrides);
    const auto tvs = cart::prune_ranks(cart::build_task_vectors(origin.origin, finetuned, overrides), plan.rank_ratio);
    const auto merged = cart::merge(tvs, plan);

    const fs::path output = common.out(a.output);
    cart::save_checkpoint(merged, output);
    for (const auto &[layer, trace] : origin.traces)
        write_text(common.out("rankmin_trace." + layer_file_stem(layer) + ".csv"), trace.to_csv());

    json manifest;
    manifest["command"] = "merge";
    manifest["version"] = kVersion;
    manifest["seed"] = common.seed;
    manifest["inputs"] = input_hashes(a.checkpoints);
    if (!a.pretrained.empty()) manifest["pretrained"] = input_hashes({a.pretrained})[0];
    if (!a.coefficients.empty()) manifest["coefficients_file"] = input_hashes({a.coefficients})[0];
    manifest["plan"] = plan.to_json();
    manifest["matrix_layers"] = tvs.layers;
    manifest["output"] = {{"path", output.string()}, {"sha256", sha256_file(output)}};
    write_text(common.out(a.output + ".manifest.json"), manifest.dump(2) + "\n");
    std::cout << output.string() << '\n';
    return 0;
}

// index -------------------------------------------------------------------

struct IndexArgs {
    std::vector<std::string> checkpoints;
    std::size_t task = 0;
    double ratio = 0.08;
    int float_bits = 32;
    std::string output = "indexed.safetensors";
};

int run_index(const IndexArgs &a, const Common &common) {
    if (a.checkpoints.empty()) throw UsageError("index needs --checkpoint paths");
    prepare_out_dir(common);
    const auto finetuned = load_all(a.checkpoints);
    const auto overrides = common.overrides();
    const auto model = cart::cart_indexing({}, finetuned, a.ratio, a.task, overrides);

    const fs::path output = common.out(a.output);
    cart::save_checkpoint(model, output);

    std::vector<std::pair<std::int64_t, std::int64_t>> dims;
    for (const auto &name : cart::matrix_names(finetuned[0], overrides)) {
        const auto &t = finetuned[0].entries.at(name);
        dims.emplace_back(t.rows(), t.cols());
    }
    const auto cost = cart::storage_cost(finetuned.size(), dims, a.ratio, static_cast<std::uint64_t>(a.float_bits));
    json report;
    report["command"] = "index";
    report["version"] = kVersion;
    report["task"] = a.task;
    report["tasks"] = finetuned.size();
    report["rank_ratio"] = a.ratio;
    report["float_bits"] = a.float_bits;
    report["matrix_layers"] = dims.size();
    report["mask_bits"] = cost.mask_bits;
    report["lowrank_bits"] = cost.lowrank_bits;
    report["inputs"] = input_hashes(a.checkpoints);
    report["output"] = {{"path", output.string()}, {"sha256", sha256_file(output)}};
    write_text(common.out(a.output + ".report.json"), report.dump(2) + "\n");
    std::cout << output.string() << '\n';
    return 0;
}

// analyze -----------------------------------------------------------------

struct AnalyzeArgs {
    std::vector<std::string> checkpoints;
    std::string pretrained;
    std::string origin = "mean";
    int rankmin_steps = 200;
};

int run_analyze(const AnalyzeArgs &a, const Common &common) {
    if (a.checkpoints.size() < 2) throw UsageError("analyze needs at least two --checkpoint paths");
    if (a.origin == "pretrained" && a.pretrained.empty()) throw UsageError("--origin pretrained needs --pretrained");
    prepare_out_dir(common);
    const auto finetuned = load_all(a.checkpoints);
    const cart::TensorMap pretrained = a.pretrained.empty() ? cart::TensorMap{} : cart::load_checkpoint(a.pretrained);
    const auto mode = cart::OriginMode::parse(a.origin, a.rankmin_steps);
    const auto overrides = common.overrides();
    const auto origin = cart::select_origin(mode, pretrained, finetuned, overrides);
    const auto report = cart::analyze_interference(origin.origin, finetuned, mode.name(), overrides);

    json j = report.to_json();
    j["inputs"] = input_hashes(a.checkpoints);
    write_text(common.out("interference.json"), j.dump(2) + "\n");
    write_text(common.out("interference.csv"), report.to_csv());
    return 0;
}

// sweep -------------------------------------------------------------------

struct SweepArgs {
    std::vector<double> ratios = cart::kDefaultSweepRatios;
    std::vector<double> lambdas{1.0};
    std::string origin = "mean";
    int tasks = 4;
    int samples_per_class = 40;
};

int run_sweep(const SweepArgs &a, const Common &common) {
    if (a.ratios.empty() || a.lambdas.empty()) throw UsageError("sweep grids must be non-empty");
    for (double r : a.ratios)
        if (r < 0.0 || r > 1.0) throw UsageError("sweep ratios must lie in [0, 1]");
    prepare_out_dir(common);

    cart::ClassificationParams params;
    params.tasks = a.tasks;
    params.samples_per_class = a.samples_per_class;
    const auto suite = cart::make_classification_suite(params, common.seed);
    const auto table = cart::rank_sweep(suite.pretrained, suite.finetuned, suite.evaluator(), a.lambdas, a.ratios,
                                        cart::OriginMode::parse(a.origin));

    json j = table.to_json();
    j["seed"] = common.seed;
    j["endpoint_violations"] = table.endpoint_violations();
    write_text(common.out("sweep.csv"), table.to_csv());
    write_text(common.out("sweep.json"), j.dump(2) + "\n");
    if (!table.endpoint_violations().empty()) {
        std::cerr << "sweep endpoint identities violated\n";
        return 1;
    }
    return 0;
}

// certify -----------------------------------------------------------------

struct CertifyArgs {
    int count = 100;
    cart::SuiteRanges ranges;
};

int run_certify(const CertifyArgs &a, const Common &common) {
    if (a.count < 1) throw UsageError("--count must be positive");
    prepare_out_dir(common);
    std::ostringstream lines;
    int failures = 0;
    for (int i = 0; i < a.count; ++i) {
        const std::uint64_t suite_seed = cart::stream_seed(common.seed, "certify." + std::to_string(i));
        const auto params = cart::sample_suite_params(a.ranges, suite_seed);
        const auto cert = cart::certify_bound(cart::generate_suite(params, suite_seed));
        if (!cert.holds) ++failures;
        lines << cert.to_json().dump() << '\n';
    }
    write_text(common.out("certificates.jsonl"), lines.str());
    std::cout << a.count - failures << '/' << a.count << " certificates hold\n";
    return failures == 0 ? 0 : 1;
}

// adapt -------------------------------------------------------------------

struct AdaptArgs {
    std::string mode = "coefficients";
    int iters = 100;
    double lr = 1e-2;
    double mask_lr = 1.0;
    double init_lambda = 0.3;
    int init_k = 2;
    double ratio = 1.0;
};

int run_adapt(const AdaptArgs &a, const Common &common) {
    if (a.iters < 0) throw UsageError("--iters must be non-negative");
    prepare_out_dir(common);
    const auto suite = cart::make_signal_noise_suite({}, common.seed);
    auto tvs = cart::build_task_vectors(suite.pretrained, suite.finetuned, common.overrides());
    tvs = cart::prune_ranks(tvs, a.ratio);

    json out;
    out["seed"] = common.seed;
    out["mode"] = a.mode;
    if (a.mode == "adarank") {
        cart::AdaRankOptions options;
        options.lr = a.lr;
        options.mask_lr = a.mask_lr;
        options.iters = a.iters;
        options.init_lambda = a.init_lambda;
        options.init_k = a.init_k;
        const auto result = cart::adarank_adapt(tvs, suite.model, suite.test, options);
        out.update(result.to_json());
        cart::AdaptResult log{result.table, result.log};
        write_text(common.out("adapt_log.csv"), log.log_csv());
    } else {
        const auto result = cart::adapt_coefficients(tvs, suite.model, suite.test, {a.lr, a.iters, a.init_lambda});
        out["coefficients"] = result.table.to_json();
        write_text(common.out("adapt_log.csv"), result.log_csv());
    }
    write_text(common.out("coefficients.json"), out.dump(2) + "\n");
    return 0;
}

// samplesize --------------------------------------------------------------

struct SampleSizeArgs {
    double a = 0.0;
    double b = 1.0;
    double eps = 0.05;
    double z = 1.96;
};

int run_samplesize(const SampleSizeArgs &s) {
    std::cout << cart::sample_size(s.a, s.b, s.eps, s.z) << '\n';
    return 0;
}

void print_error(const std::string &kind, const std::string &message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Centered, rank-reduced task-vector merging"};
    app.require_subcommand(1);
    app.fallthrough();
    app.config_formatter(std::make_shared<cart::cli::JsonConfig>());
    app.set_config("--config", "", "JSON config file (flags override it)");
    app.set_version_flag("--version", kVersion);

    Common common;
    app.add_option("--seed", common.seed, "Random seed");
    app.add_option("--out-dir", common.out_dir, "Directory for outputs");
    app.add_option("--matrix-include", common.matrix_include, "Glob of 2-D tensors forced to the SVD path");
    app.add_option("--matrix-exclude", common.matrix_exclude, "Glob of tensors forced to plain averaging");

    const std::vector<std::string> origins{"pretrained", "mean", "rankmin"};

    MergeArgs merge_args;
    auto *merge_cmd = app.add_subcommand("merge", "Merge checkpoints with (centered) low-rank task arithmetic");
    merge_cmd->add_option("-c,--checkpoint", merge_args.checkpoints, "Finetuned checkpoints")->required();
    merge_cmd->add_option("--pretrained", merge_args.pretrained, "Pretrained checkpoint");
    merge_cmd->add_option("--origin", merge_args.origin, "Task-vector origin")->check(CLI::IsMember(origins))->capture_default_str();
    merge_cmd->add_option("--ratio", merge_args.ratio, "Rank retention ratio")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    merge_cmd->add_option("--lambda", merge_args.lambda, "Global scaling coefficient")->capture_default_str();
    merge_cmd->add_option("--coefficients", merge_args.coefficients, "JSON table of per-task, per-layer coefficients");
    merge_cmd->add_option("--rankmin-steps", merge_args.rankmin_steps)->check(CLI::PositiveNumber)->capture_default_str();
    merge_cmd->add_option("--rankmin-step-size", merge_args.rankmin_step_size)->check(CLI::PositiveNumber);
    merge_cmd->add_option("-o,--output", merge_args.output, "Output file name")->capture_default_str();

    IndexArgs index_args;
    auto *index_cmd = app.add_subcommand("index", "Rebuild one task's model from the average and its low-rank delta");
    index_cmd->add_option("-c,--checkpoint", index_args.checkpoints, "Finetuned checkpoints")->required();
    index_cmd->add_option("--task", index_args.task, "Task index")->required();
    index_cmd->add_option("--ratio", index_args.ratio)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    index_cmd->add_option("--float-bits", index_args.float_bits)->check(CLI::PositiveNumber)->capture_default_str();
    index_cmd->add_option("-o,--output", index_args.output)->capture_default_str();

    AnalyzeArgs analyze_args;
    auto *analyze_cmd = app.add_subcommand("analyze", "Row-space interference and reconstruction error per layer");
    analyze_cmd->add_option("-c,--checkpoint", analyze_args.checkpoints, "Finetuned checkpoints")->required();
    analyze_cmd->add_option("--pretrained", analyze_args.pretrained);
    analyze_cmd->add_option("--origin", analyze_args.origin)->check(CLI::IsMember(origins))->capture_default_str();
    analyze_cmd->add_option("--rankmin-steps", analyze_args.rankmin_steps)->check(CLI::PositiveNumber)->capture_default_str();

    SweepArgs sweep_args;
    auto *sweep_cmd = app.add_subcommand("sweep", "Rank sweep on the synthetic classification suite");
    sweep_cmd->add_option("--ratios", sweep_args.ratios)->delimiter(',')->capture_default_str();
    sweep_cmd->add_option("--lambdas", sweep_args.lambdas)->delimiter(',')->capture_default_str();
    sweep_cmd->add_option("--origin", sweep_args.origin)->check(CLI::IsMember(origins))->capture_default_str();
    sweep_cmd->add_option("--tasks", sweep_args.tasks)->check(CLI::Range(2, 64))->capture_default_str();
    sweep_cmd->add_option("--samples-per-class", sweep_args.samples_per_class)->check(CLI::PositiveNumber)->capture_default_str();

    CertifyArgs certify_args;
    auto *certify_cmd = app.add_subcommand("certify", "Check the interference bound on random linear suites");
    certify_cmd->add_option("--count", certify_args.count)->capture_default_str();
    certify_cmd->add_option("--d-max", certify_args.ranges.d_max)->check(CLI::Range(2, 64))->capture_default_str();
    certify_cmd->add_option("--n-max", certify_args.ranges.n_max)->check(CLI::PositiveNumber)->capture_default_str();
    certify_cmd->add_option("--eta-max", certify_args.ranges.eta_max)->check(CLI::NonNegativeNumber)->capture_default_str();

    AdaptArgs adapt_args;
    auto *adapt_cmd = app.add_subcommand("adapt", "Entropy-based coefficient adaptation on a toy suite");
    adapt_cmd->add_option("--mode", adapt_args.mode)->check(CLI::IsMember({"coefficients", "adarank"}))->capture_default_str();
    adapt_cmd->add_option("--iters", adapt_args.iters)->capture_default_str();
    adapt_cmd->add_option("--lr", adapt_args.lr)->check(CLI::PositiveNumber)->capture_default_str();
    adapt_cmd->add_option("--mask-lr", adapt_args.mask_lr)->check(CLI::PositiveNumber)->capture_default_str();
    adapt_cmd->add_option("--init-lambda", adapt_args.init_lambda)->capture_default_str();
    adapt_cmd->add_option("--init-k", adapt_args.init_k)->check(CLI::NonNegativeNumber)->capture_default_str();
    adapt_cmd->add_option("--ratio", adapt_args.ratio)->check(CLI::Range(0.0, 1.0))->capture_default_str();

    SampleSizeArgs ss_args;
    auto *ss_cmd = app.add_subcommand("samplesize", "Samples needed to estimate a bounded mean");
    ss_cmd->add_option("--a", ss_args.a, "Lower bound of the metric")->capture_default_str();
    ss_cmd->add_option("--b", ss_args.b, "Upper bound of the metric")->capture_default_str();
    ss_cmd->add_option("--eps", ss_args.eps, "Margin of error")->capture_default_str();
    ss_cmd->add_option("--z", ss_args.z, "Critical value")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        print_error("UsageError", e.what());
        return 2;
    }

    try {
        if (*merge_cmd) return run_merge(merge_args, common);
        if (*index_cmd) return run_index(index_args, common);
        if (*analyze_cmd) return run_analyze(analyze_args, common);
        if (*sweep_cmd) return run_sweep(sweep_args, common);
        if (*certify_cmd) return run_certify(certify_args, common);
        if (*adapt_cmd) return run_adapt(adapt_args, common);
        if (*ss_cmd) return run_samplesize(ss_args);
    } catch (const UsageError &e) {
        print_error("UsageError", e.what());
        return 2;
    } catch (const cart::Error &e) {
        print_error(std::string(cart::to_string(e.code())), e.what());
        return 1;
    } catch (const std::exception &e) {
        print_error("Error", e.what());
        return 1;
    }
    return 2;
}
