// crab — synthetic RPM experiments end to end: dataset generation and
// ingestion, training with per-epoch checkpoints, the evaluation metrics,
// and per-sample interpretability artifacts.
//
// Exit codes: 0 success, 1 runtime/data error, 2 usage error.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crab/checkpoint.hpp"
#include "crab/dataset/generate.hpp"
#include "crab/dataset/ingest.hpp"
#include "crab/evaluate/evaluate.hpp"
#include "crab/train.hpp"

namespace {

namespace fs = std::filesystem;
using Model = crab::model::CrabModel<double>;
using Session = crab::train::Session<double>;

// Relative outputs land under $CRAB_OUTDIR when it is set.
std::string out_path(const std::string& p) {
  const char* root = std::getenv("CRAB_OUTDIR");
  if (!root || !*root || fs::path(p).is_absolute()) return p;
  fs::create_directories(root);
  return (fs::path(root) / p).string();
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::ofstream open_out(const std::string& path) {
  ensure_parent(path);
  std::ofstream f(path);
  crab::require<crab::FormatError>(f.good(), "cannot open " + path + " for writing");
  f.precision(17);
  return f;
}

void write_pgm(const std::string& path, const crab::MatrixD& pixels01, int side,
               int cols) {
  crab::require<crab::ShapeError>(pixels01.rows() == side * side &&
                                      pixels01.cols() == cols,
                                  "write_pgm: pixel block shape mismatch");
  ensure_parent(path);
  std::ofstream f(path, std::ios::binary);
  crab::require<crab::FormatError>(f.good(), "cannot open " + path + " for writing");
  f << "P5\n" << side * cols << " " << side << "\n255\n";
  // panels concatenate left to right
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < cols; ++c)
      for (int x = 0; x < side; ++x) {
        const double v = pixels01(r * side + x, c);
        const long byte = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
        f.put(static_cast<char>(byte));
      }
  crab::require<crab::FormatError>(f.good(), "short write to " + path);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config = "center";
  int n = 0;
  int candidates = 8;
  std::string mode = "unbiased";
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_generate(const GenerateArgs& a) {
  const auto gc = crab::dataset::generator_config(a.config);
  const auto mode = a.mode == "biased" ? crab::dataset::CandidateMode::Biased
                                       : crab::dataset::CandidateMode::Unbiased;
  crab::dataset::BiasAudit audit;
  const auto ds =
      crab::dataset::generate_dataset(gc, a.n, a.candidates, mode, a.seed, &audit);

  const std::string path = out_path(a.out);
  ensure_parent(path);
  const auto bytes = crab::dataset::serialize_dataset(ds);
  crab::dataset::write_file_bytes(path, bytes);

  crab::dataset::Manifest m;
  m.emplace_back("config", a.config);
  m.emplace_back("samples", std::to_string(a.n));
  m.emplace_back("candidates", std::to_string(a.candidates));
  m.emplace_back("mode", a.mode);
  m.emplace_back("seed", std::to_string(a.seed));
  m.emplace_back("checksum", hex64(crab::fnv1a64(bytes)));
  std::ostringstream acc, chance;
  acc.precision(17);
  chance.precision(17);
  acc << audit.vote_accuracy;
  chance << audit.chance;
  m.emplace_back("vote_accuracy", acc.str());
  m.emplace_back("vote_chance", chance.str());
  crab::dataset::write_manifest(path, m);

  std::cout << "wrote " << path << " (" << a.n << " samples, checksum "
            << hex64(crab::fnv1a64(bytes)) << ")\n"
            << "candidate-only vote accuracy " << audit.vote_accuracy
            << " vs chance " << audit.chance << "\n";
  return 0;
}

struct IngestArgs {
  std::string root;
  std::string config = "center";
  std::string out;
};

int cmd_ingest(const IngestArgs& a) {
  crab::dataset::IngestStats st;
  const auto ds = crab::dataset::ingest_official(a.root, a.config, &st);
  const std::string path = out_path(a.out);
  ensure_parent(path);
  const auto bytes = crab::dataset::serialize_dataset(ds);
  crab::dataset::write_file_bytes(path, bytes);

  crab::dataset::Manifest m;
  m.emplace_back("config", a.config);
  m.emplace_back("source", a.root);
  m.emplace_back("records_found", std::to_string(st.found));
  m.emplace_back("records_ingested", std::to_string(st.ingested));
  m.emplace_back("records_skipped", std::to_string(st.skipped));
  m.emplace_back("checksum", hex64(crab::fnv1a64(bytes)));
  crab::dataset::write_manifest(path, m);

  std::cout << "ingested " << st.ingested << "/" << st.found << " records into "
            << path << " (" << st.skipped << " skipped)\n";
  return 0;
}

struct TrainArgs {
  std::string preset = "center";
  std::string config_file;
  std::string data;
  std::string out = "run";
  std::string resume;
  std::string dtype = "double";
  int epochs = -1;  // -1: the config's warmup + abstraction total
  bool no_abstraction = false;
  std::int64_t seed = -1;
};

template <typename T>
int run_train(const TrainArgs& a) {
  const auto ds = crab::dataset::read_dataset(a.data);

  crab::train::Session<T> session = [&] {
    if (!a.resume.empty()) return crab::ckpt::load_session<T>(a.resume);
    crab::RunConfig cfg = crab::run_config_preset(a.preset);
    if (!a.config_file.empty()) crab::apply_config_file(cfg, a.config_file);
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    crab::validate(cfg);
    return crab::train::Session<T>(cfg);
  }();

  const int target_epochs =
      a.epochs >= 0 ? a.epochs : session.cfg.total_epochs();
  const std::string outdir = out_path(a.out);
  fs::create_directories(outdir);
  open_out(outdir + "/config.txt") << crab::config_to_text(session.cfg);

  std::ofstream log = open_out(outdir + "/loss.csv");
  crab::train::write_log_header(log);

  while (session.epochs_done < target_epochs) {
    const auto rows =
        crab::train::run_epoch(session, ds, !a.no_abstraction);
    double mean = 0;
    for (const auto& r : rows) {
      crab::train::write_log_row(log, r);
      mean += r.report.loss;
    }
    log.flush();
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", session.epochs_done);
    crab::ckpt::save_session(outdir + "/" + name, session);
    std::cout << "epoch " << session.epochs_done - 1 << ": mean loss "
              << (rows.empty() ? 0.0 : mean / static_cast<double>(rows.size()))
              << " (" << rows.size() << " steps)"
              << (session.model.priors.active ? " [priors active]" : "") << "\n";
  }
  crab::ckpt::save_session(outdir + "/latest.ckpt", session);
  std::cout << "trained through epoch " << session.epochs_done << ", checkpoints in "
            << outdir << "\n";
  return 0;
}

// Checkpoints always store 64-bit parameters, so float-trained runs can be
// evaluated (and resumed, with matching --dtype) like any other.
int cmd_train(const TrainArgs& a) {
  return a.dtype == "float" ? run_train<float>(a) : run_train<double>(a);
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string metric;
  std::string out;
  int targets = 0;     // 0: sweep 1..3
  int candidates = 0;  // 0: sweep {2,4,8,16}
  int eval_batch = 100;
  int vd_batch = 256;
  std::int64_t seed = -1;
};

void check_compat(const Session& s, const crab::dataset::Dataset& ds) {
  crab::require<crab::ArgError>(
      s.cfg.image_side == ds.meta.image_side,
      "checkpoint and dataset disagree on image side: " +
          std::to_string(s.cfg.image_side) + " vs " +
          std::to_string(ds.meta.image_side));
}

int cmd_eval(const EvalArgs& a) {
  Session session = crab::ckpt::load_session<double>(a.ckpt);
  const auto ds = crab::dataset::read_dataset(a.data);
  check_compat(session, ds);
  Model& m = session.model;
  const std::uint64_t seed =
      a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : session.cfg.seed;

  if (a.metric == "sa") {
    const double sa = crab::evaluate::selection_accuracy(
        m, ds, static_cast<std::size_t>(a.eval_batch));
    std::ofstream f = open_out(out_path(a.out.empty() ? "sa.csv" : a.out));
    f << "sample,chosen,answer,correct\n";
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const auto& s = ds.samples[i];
      const auto sel = crab::evaluate::select_answer(
          m, s.panels, crab::model::TargetMask(1) << 8, s.candidates);
      f << i << ',' << sel.chosen_index << ',' << int(s.answer_index) << ','
        << (sel.chosen_index == int(s.answer_index) ? 1 : 0) << '\n';
    }
    std::cout << "sa=" << sa << "\n";
    return 0;
  }

  if (a.metric == "gsa") {
    const std::vector<int> target_counts =
        a.targets > 0 ? std::vector<int>{a.targets} : std::vector<int>{1, 2, 3};
    const std::vector<int> cand_counts = a.candidates > 0
                                             ? std::vector<int>{a.candidates}
                                             : std::vector<int>{2, 4, 8, 16};
    std::ofstream f = open_out(out_path(a.out.empty() ? "gsa.csv" : a.out));
    f << "targets,candidates,gsa\n";
    for (int t : target_counts)
      for (int c : cand_counts) {
        crab::SeededRng rng(seed, crab::model::streams::kEval);
        const double g = crab::evaluate::global_selection_accuracy(
            m, ds, t, c, rng, static_cast<std::size_t>(a.eval_batch));
        f << t << ',' << c << ',' << g << '\n';
        std::cout << "gsa targets=" << t << " candidates=" << c << ": " << g << "\n";
      }
    return 0;
  }

  if (a.metric == "vd") {
    const auto gc = crab::dataset::generator_config(ds.meta.config_name);
    crab::SeededRng rng(seed, crab::model::streams::kEval);
    const auto vd = crab::evaluate::variance_decline(m, gc, a.vd_batch, rng);
    std::ofstream f = open_out(out_path(a.out.empty() ? "vd.csv" : a.out));
    f << "concept";
    for (const auto& attr : gc.attributes) f << ',' << attr.name;
    f << '\n';
    for (int cm = 0; cm < m.cfg.concepts; ++cm) {
      f << cm;
      for (Eigen::Index v = 0; v < vd.values.cols(); ++v) f << ',' << vd.values(cm, v);
      f << '\n';
    }
    std::cout << "vd matrix (" << m.cfg.concepts << " concepts x "
              << gc.attributes.size() << " attributes) written\n";
    return 0;
  }

  if (a.metric == "ari") {
    const auto rep = crab::evaluate::ari_evaluation(
        m, ds, static_cast<std::size_t>(a.eval_batch));
    std::ofstream f = open_out(out_path(a.out.empty() ? "ari.csv" : a.out));
    f << "concept";
    for (const auto& attr : rep.attributes) f << ',' << attr;
    f << '\n';
    for (int cm = 0; cm < m.cfg.concepts; ++cm) {
      f << cm;
      for (Eigen::Index v = 0; v < rep.ari.cols(); ++v) f << ',' << rep.ari(cm, v);
      f << '\n';
    }
    f << "best";
    for (double b : rep.best_ari) f << ',' << b;
    f << '\n';
    for (std::size_t v = 0; v < rep.attributes.size(); ++v)
      std::cout << "ari " << rep.attributes[v] << ": best " << rep.best_ari[v]
                << " (concept " << rep.best_concept[v] << ")\n";
    std::cout << "ari average=" << rep.average << "\n";
    return 0;
  }

  if (a.metric == "rules") {
    crab::require<crab::ArgError>(m.priors.active,
                                  "rule export needs fitted priors; train past warm-up");
    std::ofstream f = open_out(out_path(a.out.empty() ? "rules.csv" : a.out));
    f << "concept,sample";
    for (int d = 0; d < m.cfg.rule_dim; ++d) f << ",r" << d;
    f << ",component";
    if (!ds.samples.empty())
      for (const auto& ann : ds.samples.front().annotations)
        f << ',' << ann.attribute << "_rule";
    f << '\n';
    const std::size_t step = static_cast<std::size_t>(a.eval_batch);
    for (std::size_t start = 0; start < ds.samples.size(); start += step) {
      const std::size_t count = std::min(step, ds.samples.size() - start);
      std::vector<const crab::dataset::Image8*> panels;
      for (std::size_t i = start; i < start + count; ++i)
        for (const auto& p : ds.samples[i].panels) panels.push_back(&p);
      const auto Z = m.encode_means(crab::model::images_to_columns<double>(panels));
      const auto rs = m.rule_posterior(Z, static_cast<int>(count));
      for (int cm = 0; cm < m.cfg.concepts; ++cm)
        for (std::size_t b = 0; b < count; ++b) {
          const crab::VectorD r =
              rs.mu[static_cast<std::size_t>(cm)].col(static_cast<Eigen::Index>(b));
          f << cm << ',' << start + b;
          for (int d = 0; d < m.cfg.rule_dim; ++d) f << ',' << r[d];
          f << ','
            << crab::abstraction::assign_rule_category(
                   m.priors.per_concept[static_cast<std::size_t>(cm)], r);
          for (const auto& ann : ds.samples[start + b].annotations)
            f << ','
              << (ann.mapped ? crab::dataset::rule_kind_name(ann.rule.kind)
                             : "unmapped");
          f << '\n';
        }
    }
    std::cout << "rule latents exported for " << ds.samples.size() << " samples x "
              << m.cfg.concepts << " concepts\n";
    return 0;
  }

  throw crab::ArgError("unknown metric: " + a.metric);
}

struct InspectArgs {
  std::string ckpt;
  std::string data;
  int sample = 0;
  std::string out = "inspect";
  int steps = 7;
  double span = 2.0;
  int target = 8;
};

int cmd_inspect(const InspectArgs& a) {
  Session session = crab::ckpt::load_session<double>(a.ckpt);
  const auto ds = crab::dataset::read_dataset(a.data);
  check_compat(session, ds);
  Model& m = session.model;
  crab::require<crab::ArgError>(
      a.sample >= 0 && a.sample < static_cast<int>(ds.samples.size()),
      "sample index out of range: " + std::to_string(a.sample));
  crab::require<crab::ArgError>(a.target >= 0 && a.target < crab::kPanels,
                                "target cell must be 0..8");
  const auto& s = ds.samples[static_cast<std::size_t>(a.sample)];
  const std::string outdir = out_path(a.out);
  fs::create_directories(outdir);

  // predicted panel at the blanked cell, decoded to pixels
  std::vector<const crab::dataset::Image8*> panels;
  for (const auto& p : s.panels) panels.push_back(&p);
  const auto X = crab::model::images_to_columns<double>(panels);
  const crab::model::TargetMask mask = crab::model::TargetMask(1) << a.target;
  const auto pred = crab::evaluate::predict_targets(m, X, {mask});
  const crab::VectorD latent = pred.cells[0][0].second;
  const crab::MatrixD decoded = m.decode_means(latent);
  write_pgm(outdir + "/prediction.pgm", decoded, m.cfg.image_side, 1);

  // candidate distance table, one row per candidate, one column per concept
  const auto sel = crab::evaluate::select_answer(m, s.panels, mask, s.candidates);
  std::ofstream f = open_out(outdir + "/distances.csv");
  f << "candidate";
  for (int cm = 0; cm < m.cfg.concepts; ++cm) f << ",concept" << cm;
  f << ",total,chosen\n";
  for (Eigen::Index c = 0; c < sel.per_candidate_concept_distances.rows(); ++c) {
    f << c;
    for (Eigen::Index cm = 0; cm < sel.per_candidate_concept_distances.cols(); ++cm)
      f << ',' << sel.per_candidate_concept_distances(c, cm);
    f << ',' << sel.per_candidate_concept_distances.row(c).sum() << ','
      << (c == sel.chosen_index ? 1 : 0) << '\n';
  }

  // per-concept latent traversals decoded as image strips
  const crab::MatrixD probe = X.col(static_cast<Eigen::Index>(a.target));
  for (int cm = 0; cm < m.cfg.concepts; ++cm) {
    const auto strip =
        crab::evaluate::interpolate_concept(m, probe, cm, a.steps, a.span);
    char name[32];
    std::snprintf(name, sizeof name, "interp_c%d.pgm", cm);
    write_pgm(outdir + "/" + name, strip, m.cfg.image_side, a.steps);
  }

  std::cout << "sample " << a.sample << ": chose candidate " << sel.chosen_index
            << " (answer " << int(s.answer_index) << "), artifacts in " << outdir
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic RPM concept-rule experiments"};
  app.require_subcommand(1);

  GenerateArgs g;
  auto* gen = app.add_subcommand("generate", "render a synthetic dataset");
  gen->add_option("--config", g.config, "generator preset (center|center-toy|grid2x2)");
  gen->add_option("--n", g.n, "number of samples")->required();
  gen->add_option("--candidates", g.candidates, "candidate panels per sample");
  gen->add_option("--mode", g.mode, "candidate style")
      ->check(CLI::IsMember({"biased", "unbiased"}));
  gen->add_option("--seed", g.seed, "dataset seed");
  gen->add_option("--out", g.out, "output dataset path")->required();

  IngestArgs in_args;
  auto* ing = app.add_subcommand("ingest", "convert an official archive");
  ing->add_option("--root", in_args.root, "archive directory")->required();
  ing->add_option("--config", in_args.config, "target generator taxonomy");
  ing->add_option("--out", in_args.out, "output dataset path")->required();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "fit a model");
  tr->add_option("--preset", t.preset, "hyperparameter preset (center|center-toy)");
  tr->add_option("--config", t.config_file, "key=value overrides file");
  tr->add_option("--data", t.data, "training dataset")->required();
  tr->add_option("--out", t.out, "output directory");
  tr->add_option("--resume", t.resume, "checkpoint to continue from");
  tr->add_option("--dtype", t.dtype, "arithmetic precision; resume with the same value")
      ->check(CLI::IsMember({"double", "float"}));
  tr->add_option("--epochs", t.epochs, "stop after this many total epochs");
  tr->add_flag("--no-abstraction", t.no_abstraction,
               "plain ELBO only; skip prior refits");
  tr->add_option("--seed", t.seed, "override config seed");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "score a checkpoint");
  ev->add_option("--ckpt", e.ckpt, "checkpoint path")->required();
  ev->add_option("--data", e.data, "evaluation dataset")->required();
  ev->add_option("--metric", e.metric, "sa|gsa|vd|ari|rules")
      ->required()
      ->check(CLI::IsMember({"sa", "gsa", "vd", "ari", "rules"}));
  ev->add_option("--out", e.out, "output table path");
  ev->add_option("--targets", e.targets, "gsa: blank count (default sweep 1..3)");
  ev->add_option("--candidates", e.candidates,
                 "gsa: candidate count (default sweep 2,4,8,16)");
  ev->add_option("--eval-batch", e.eval_batch, "evaluation batch size");
  ev->add_option("--vd-batch", e.vd_batch, "probe batch for the variance metric");
  ev->add_option("--seed", e.seed, "probe seed (default: checkpoint seed)");

  InspectArgs i;
  auto* ins = app.add_subcommand("inspect", "per-sample artifacts");
  ins->add_option("--ckpt", i.ckpt, "checkpoint path")->required();
  ins->add_option("--data", i.data, "dataset path")->required();
  ins->add_option("--sample", i.sample, "sample index")->required();
  ins->add_option("--out", i.out, "output directory");
  ins->add_option("--steps", i.steps, "interpolation steps per concept");
  ins->add_option("--span", i.span, "traversal half-width in posterior stds");
  ins->add_option("--target", i.target, "cell to blank and predict (0..8)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(g);
    if (ing->parsed()) return cmd_ingest(in_args);
    if (tr->parsed()) return cmd_train(t);
    if (ev->parsed()) return cmd_eval(e);
    if (ins->parsed()) return cmd_inspect(i);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 2;
}
