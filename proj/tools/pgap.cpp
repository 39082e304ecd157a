// pgap: command-line front end for dataset generation, mining, training,
// evaluation, benchmarking and descriptor export.
//
// Exit codes: 0 success, 1 usage error, 2 data or validation error,
// 3 runtime failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pgap/checkpoint.hpp"
#include "pgap/config.hpp"
#include "pgap/dataio.hpp"
#include "pgap/mining.hpp"
#include "pgap/retrieval.hpp"
#include "pgap/synthgen.hpp"
#include "pgap/training.hpp"
#include "pgap/version.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Hashing

std::string hex(const unsigned char* data, unsigned len) {
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(data[i]);
    return os.str();
}

std::string sha256(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("SHA-256 failed");
    }
    return hex(digest, len);
}

/// File hash, or for a directory the hash of "relative-path NUL file-hash LF"
/// over all regular files in sorted path order.
std::string sha256_path(const fs::path& path) {
    if (!fs::exists(path)) throw pgap::LoadError("not found: " + path.string());
    if (!fs::is_directory(path)) return sha256(pgap::detail::read_file(path));
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path)) {
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), path));
    }
    std::sort(files.begin(), files.end());
    std::string listing;
    for (const auto& f : files) {
        listing += f.generic_string();
        listing += '\0';
        listing += sha256(pgap::detail::read_file(path / f));
        listing += '\n';
    }
    return sha256(listing);
}

// ---------------------------------------------------------------------------
// Run manifest

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

fs::path manifest_path(const fs::path& out) {
    fs::path p = out;
    if (p.has_extension() && !fs::is_directory(p)) p.replace_extension();
    return fs::path(p.string() + ".manifest.json");
}

class Manifest {
public:
    Manifest(std::string command, fs::path out) : path_(manifest_path(out)) {
        doc_["command"] = std::move(command);
        doc_["tool_version"] = pgap::kVersion;
        doc_["threads"] = pgap::worker_count();
        doc_["seeds"] = json::object();
        doc_["inputs"] = json::object();
        doc_["timestamps"] = {{"started", utc_now()}};
    }

    void argument(const std::string& key, json value) { doc_["arguments"][key] = std::move(value); }
    void config(std::string text) { doc_["config"] = std::move(text); }
    void seed(const std::string& key, std::uint64_t value) { doc_["seeds"][key] = value; }
    void input(const fs::path& p) { doc_["inputs"][p.string()] = sha256_path(p); }

    void write() const {
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        std::ofstream out(path_);
        if (!out) throw pgap::LoadError("cannot write manifest " + path_.string());
        out << doc_.dump(2) << '\n';
    }

    void finish() {
        doc_["timestamps"]["finished"] = utc_now();
        write();
    }

private:
    fs::path path_;
    json doc_;
};

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

pgap::TrainConfig load_train_config(const std::string& file) {
    if (file.empty()) return {};
    return pgap::train_config_from(pgap::read_key_values(file));
}

std::size_t checkpoint_points(const pgap::Checkpoint& ckpt, std::size_t override_points) {
    if (override_points > 0) return override_points;
    return ckpt.metadata.value("num_points", std::size_t{10000});
}

/// Downsampling seed: the one used for validation during training unless given.
std::uint64_t checkpoint_seed(const pgap::Checkpoint& ckpt, const std::optional<std::uint64_t>& override_seed) {
    if (override_seed) return *override_seed;
    return ckpt.metadata.value("eval_seed", ckpt.seed);
}

// ---------------------------------------------------------------------------
// Commands

struct GenerateArgs {
    std::string spec;
    std::string out;
};

int cmd_generate(const GenerateArgs& a) {
    pgap::OrchardSpec spec;
    if (!a.spec.empty()) spec = pgap::orchard_spec_from(pgap::read_key_values(a.spec));
    spec.validate();
    Manifest m("generate", a.out);
    m.argument("spec", a.spec);
    m.argument("out", a.out);
    m.config(pgap::to_config_text(spec));
    m.seed("orchard", spec.seed);
    if (!a.spec.empty()) m.input(a.spec);
    m.write();

    const pgap::Sequence seq = pgap::generate(spec);
    pgap::save_sequence(a.out, seq);
    m.finish();
    std::cout << "wrote " << seq.size() << " frames, " << seq.meta.num_segments << " segments to " << a.out << '\n'
              << "sha256 " << sha256_path(a.out) << '\n';
    return kExitOk;
}

int cmd_validate(const std::string& dir) {
    const pgap::Sequence seq = pgap::load_sequence(dir);
    std::size_t points = 0;
    for (const auto& r : seq.records) points += r.cloud.size();
    std::cout << "ok: " << seq.meta.name << ", " << seq.size() << " frames, " << seq.meta.num_segments
              << " segments, " << points << " points\n";
    return kExitOk;
}

struct MineArgs {
    std::string data;
    std::string config;
    std::string out;
    std::uint64_t epoch = 0;
    bool segment_aware = false;
};

int cmd_mine(const MineArgs& a) {
    const pgap::TrainConfig cfg = load_train_config(a.config);
    Manifest m("mine", a.out);
    m.argument("data", a.data);
    m.argument("out", a.out);
    m.argument("epoch", a.epoch);
    m.argument("segment_aware", a.segment_aware);
    m.config(pgap::to_config_text(cfg));
    m.seed("mining", cfg.mining.seed);
    m.input(a.data);
    if (!a.config.empty()) m.input(a.config);
    m.write();

    const pgap::Sequence seq = pgap::load_sequence(a.data);
    const auto mined = pgap::mine_tuples(seq, cfg.mining, a.epoch);
    const auto gt = pgap::build_ground_truth(seq, cfg.mining, a.segment_aware);
    const fs::path tuples = a.out + "_tuples.csv";
    const fs::path truth = a.out + "_gt.csv";
    ensure_parent(tuples);
    pgap::write_tuples_csv(tuples, mined.tuples);
    pgap::write_ground_truth_csv(truth, gt);
    m.finish();
    std::cout << mined.tuples.size() << " tuples, " << mined.frames_without_positive
              << " frames without a positive, " << gt.queries_with_revisits() << " queries with revisits\n";
    return kExitOk;
}

struct TrainArgs {
    std::vector<std::string> data;
    std::string val;
    std::string config;
    std::string out;
    bool no_slc = false;
};

int cmd_train(const TrainArgs& a) {
    pgap::TrainConfig cfg = load_train_config(a.config);
    if (a.no_slc) cfg.loss.slc_enabled = false;
    cfg.validate();

    Manifest m("train", a.out);
    m.argument("data", a.data);
    m.argument("val", a.val);
    m.argument("out", a.out);
    m.argument("no_slc", a.no_slc);
    m.config(pgap::to_config_text(cfg));
    m.seed("optim", cfg.optim.seed);
    m.seed("mining", cfg.mining.seed);
    for (const auto& d : a.data) m.input(d);
    m.input(a.val);
    if (!a.config.empty()) m.input(a.config);
    m.write();

    std::vector<pgap::Sequence> sequences;
    for (const auto& d : a.data) sequences.push_back(pgap::load_sequence(d));
    const pgap::Sequence validation = pgap::load_sequence(a.val);

    fs::path history_path = a.out;
    history_path.replace_extension(".history.csv");
    ensure_parent(history_path);
    std::ofstream history(history_path);
    if (!history) throw pgap::LoadError("cannot write " + history_path.string());
    history << "epoch,L,L_T,L_S,val_recall@1\n";

    const auto result = pgap::train(sequences, validation, cfg, [&](const pgap::EpochStats& s) {
        using pgap::detail::format_double;
        history << s.epoch << ',' << format_double(s.loss) << ',' << format_double(s.triplet) << ','
                << format_double(s.slc) << ',' << format_double(s.val_recall_at_1) << '\n';
        history.flush();
        std::cerr << "epoch " << s.epoch << "  L " << s.loss << "  L_T " << s.triplet << "  L_S " << s.slc
                  << "  val R@1 " << s.val_recall_at_1 << '\n';
    });

    pgap::Checkpoint ckpt;
    ckpt.model = result.best_model;
    ckpt.seed = cfg.optim.seed;
    ckpt.epoch = result.best_epoch;
    for (const auto& s : result.history) {
        ckpt.history.push_back({{"epoch", s.epoch},
                                {"loss", s.loss},
                                {"triplet", s.triplet},
                                {"slc", s.slc},
                                {"val_recall_at_1", s.val_recall_at_1}});
    }
    ckpt.metadata = {{"num_points", cfg.data.num_points},
                     {"best_val_recall_at_1", result.best_recall},
                     {"tuples_per_epoch", result.tuples_per_epoch},
                     {"frames_without_positive", result.frames_without_positive},
                     {"slc_enabled", cfg.loss.slc_enabled},
                     {"eval_radius", cfg.mining.eval_radius},
                     {"revisit_exclusion_window", cfg.mining.revisit_exclusion_window},
                     {"config", pgap::to_config_text(cfg)}};
    pgap::save_checkpoint(a.out, ckpt);
    m.finish();
    std::cout << "best epoch " << result.best_epoch << ", val R@1 " << result.best_recall << ", checkpoint "
              << a.out << '\n';
    return kExitOk;
}

struct EvaluateArgs {
    std::string data;
    std::string ckpt;
    std::string out;
    bool segment_aware = false;
    std::size_t points = 0;
    std::optional<std::uint64_t> seed;
};

int cmd_evaluate(const EvaluateArgs& a) {
    const pgap::Checkpoint ckpt = pgap::load_checkpoint(a.ckpt);
    pgap::MiningConfig mining;
    mining.eval_radius = ckpt.metadata.value("eval_radius", mining.eval_radius);
    mining.revisit_exclusion_window =
        ckpt.metadata.value("revisit_exclusion_window", mining.revisit_exclusion_window);
    const std::size_t points = checkpoint_points(ckpt, a.points);
    const std::uint64_t seed = checkpoint_seed(ckpt, a.seed);

    Manifest m("evaluate", a.out);
    m.argument("data", a.data);
    m.argument("ckpt", a.ckpt);
    m.argument("out", a.out);
    m.argument("segment_aware", a.segment_aware);
    m.argument("points", points);
    m.seed("sampling", seed);
    m.input(a.data);
    m.input(a.ckpt);
    m.write();

    const pgap::Sequence seq = pgap::load_sequence(a.data);
    const auto report = pgap::evaluate_sequence(ckpt.model, seq, mining, a.segment_aware, {points, seed});
    ensure_parent(a.out);
    pgap::write_report(a.out, report);
    m.finish();
    std::cout << report.protocol() << ": R@1 " << report.recall_at_k.at(0) << ", R@1% " << report.recall_at_1pct
              << " over " << report.query_count << " queries\n";
    return kExitOk;
}

struct BenchmarkArgs {
    std::string ckpt;
    std::string data;
    std::string out;
    std::size_t batch = 20;
    std::size_t reps = 10;
    std::size_t points = 0;
};

int cmd_benchmark(const BenchmarkArgs& a) {
    const pgap::Checkpoint ckpt = pgap::load_checkpoint(a.ckpt);
    const std::size_t points = checkpoint_points(ckpt, a.points);
    const pgap::Sequence seq = a.data.empty() ? pgap::generate(pgap::OrchardSpec{}) : pgap::load_sequence(a.data);
    if (seq.size() == 0) throw pgap::ValidationError("benchmark sequence is empty");
    std::vector<pgap::PointCloud> batch;
    for (std::size_t i = 0; i < a.batch; ++i) {
        const std::size_t f = i % seq.size();
        batch.push_back(pgap::prepare_scan(seq.records[f].cloud, points, 0, f));
    }
    const auto report = pgap::benchmark_runtime(ckpt.model, batch, a.reps);
    const std::string text = pgap::to_json(report).dump(2);
    if (!a.out.empty()) {
        ensure_parent(a.out);
        std::ofstream(a.out) << text << '\n';
    }
    std::cout << text << '\n';
    return kExitOk;
}

struct ExportArgs {
    std::string data;
    std::string ckpt;
    std::string out;
    std::size_t points = 0;
    std::optional<std::uint64_t> seed;
};

int cmd_export(const ExportArgs& a) {
    const pgap::Checkpoint ckpt = pgap::load_checkpoint(a.ckpt);
    const std::size_t points = checkpoint_points(ckpt, a.points);
    const std::uint64_t seed = checkpoint_seed(ckpt, a.seed);
    Manifest m("export", a.out);
    m.argument("data", a.data);
    m.argument("ckpt", a.ckpt);
    m.argument("out", a.out);
    m.argument("points", points);
    m.seed("sampling", seed);
    m.input(a.data);
    m.input(a.ckpt);
    m.write();

    const pgap::Sequence seq = pgap::load_sequence(a.data);
    const auto descriptors = pgap::describe_sequence(ckpt.model, seq, {points, seed});
    ensure_parent(a.out);
    pgap::write_descriptor_dump(a.out, seq.meta.name, descriptors);
    m.finish();
    std::cout << "wrote " << descriptors.size() << " descriptors to " << a.out << '\n';
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PointNetPGAP place recognition for orchard LiDAR sequences"};
    app.set_version_flag("--version", std::string(pgap::kVersion));
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "Render a synthetic orchard sequence");
    generate->add_option("--spec", gen.spec, "Orchard spec file (key = value)")->check(CLI::ExistingFile);
    generate->add_option("--out", gen.out, "Output sequence directory")->required();

    std::string validate_dir;
    auto* validate = app.add_subcommand("validate", "Check a sequence directory");
    validate->add_option("--data", validate_dir, "Sequence directory")->required();

    MineArgs mine_args;
    auto* mine = app.add_subcommand("mine", "Write training tuples and ground truth");
    mine->add_option("--data", mine_args.data, "Sequence directory")->required();
    mine->add_option("--config", mine_args.config, "Training config file")->check(CLI::ExistingFile);
    mine->add_option("--out", mine_args.out, "Output prefix")->required();
    mine->add_option("--epoch", mine_args.epoch, "Epoch used to draw negatives");
    mine->add_flag("--segment-aware", mine_args.segment_aware, "Same-segment ground truth");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--data", train_args.data, "Training sequence directories")->required();
    train->add_option("--val", train_args.val, "Validation sequence directory")->required();
    train->add_option("--config", train_args.config, "Training config file")->check(CLI::ExistingFile);
    train->add_option("--out", train_args.out, "Checkpoint path")->required();
    train->add_flag("--no-slc", train_args.no_slc, "Disable the segment classification loss");

    EvaluateArgs eval_args;
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a sequence");
    evaluate->add_option("--data", eval_args.data, "Sequence directory")->required();
    evaluate->add_option("--ckpt", eval_args.ckpt, "Checkpoint")->required();
    evaluate->add_option("--out", eval_args.out, "Report prefix")->required();
    evaluate->add_flag("--segment-aware", eval_args.segment_aware, "Require the same segment for a true match");
    evaluate->add_option("--points", eval_args.points, "Points per scan (default: as trained)");
    evaluate->add_option("--seed", eval_args.seed, "Downsampling seed (default: as validated in training)");

    BenchmarkArgs bench_args;
    auto* benchmark = app.add_subcommand("benchmark", "Time descriptor extraction");
    benchmark->add_option("--ckpt", bench_args.ckpt, "Checkpoint")->required();
    benchmark->add_option("--data", bench_args.data, "Sequence directory (default: synthetic orchard)");
    benchmark->add_option("--batch", bench_args.batch, "Scans per batch")->capture_default_str()->check(
        CLI::PositiveNumber);
    benchmark->add_option("--reps", bench_args.reps, "Timed repetitions")->capture_default_str()->check(
        CLI::PositiveNumber);
    benchmark->add_option("--points", bench_args.points, "Points per scan (default: as trained)");
    benchmark->add_option("--out", bench_args.out, "Also write the JSON report here");

    ExportArgs export_args;
    auto* exporter = app.add_subcommand("export", "Dump descriptors of a sequence");
    exporter->add_option("--data", export_args.data, "Sequence directory")->required();
    exporter->add_option("--ckpt", export_args.ckpt, "Checkpoint")->required();
    exporter->add_option("--out", export_args.out, "Descriptor dump file")->required();
    exporter->add_option("--points", export_args.points, "Points per scan (default: as trained)");
    exporter->add_option("--seed", export_args.seed, "Downsampling seed (default: as validated in training)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*generate) return cmd_generate(gen);
        if (*validate) return cmd_validate(validate_dir);
        if (*mine) return cmd_mine(mine_args);
        if (*train) return cmd_train(train_args);
        if (*evaluate) return cmd_evaluate(eval_args);
        if (*benchmark) return cmd_benchmark(bench_args);
        if (*exporter) return cmd_export(export_args);
    } catch (const pgap::DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
