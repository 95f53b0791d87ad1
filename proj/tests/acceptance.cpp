// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// Criteria 6-8 drive the command implementations exactly as the CLI does.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "metasr/cli.hpp"
#include "metasr/selfcheck.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace metasr;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.passed) ++failures;
  std::cout << (o.passed ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << " ("
            << fmt(seconds_since(t0), 1) << "s)" << std::endl;
}

std::string check_summary(const selfcheck::CheckResult& r) {
  std::ostringstream os;
  os << r.name << " worst=" << r.worst << "/" << r.tolerance << " n=" << r.instances;
  if (!r.passed && !r.detail.empty()) os << " [" << r.detail << "]";
  return os.str();
}

// budget <= 0 means no runtime bound.
Outcome checks_outcome(const std::vector<selfcheck::CheckResult>& rs, double seconds, double budget = 0.0) {
  Outcome o{selfcheck::all_passed(rs) && (budget <= 0.0 || seconds < budget), ""};
  for (std::size_t i = 0; i < rs.size(); ++i) o.detail += (i ? "; " : "") + check_summary(rs[i]);
  if (budget > 0.0) o.detail += "; runtime " + fmt(seconds, 2) + "s < " + fmt(budget, 0) + "s";
  return o;
}

// --- CLI plumbing ------------------------------------------------------------------------

fs::path g_root;

void cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"metasr"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != cli::kExitOk) {
    std::string joined;
    for (const auto& a : args) joined += " " + a;
    throw std::runtime_error("metasr" + joined + " exited " + std::to_string(code) + ": " + err.str());
  }
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

const std::vector<int> kSeeds = {1, 2, 3};
constexpr int kTargets = 4;

std::string data_dir(int seed) { return (g_root / ("family" + std::to_string(seed))).string(); }
std::string ckpt_dir(const std::string& regime, int seed) {
  return (g_root / (regime + std::to_string(seed))).string();
}

std::vector<std::string> source_args(int seed) {
  std::vector<std::string> a;
  for (int i = 0; i < 6; ++i) {
    a.push_back("--corpus");
    a.push_back(data_dir(seed) + "/src" + std::to_string(i) + ".jsonl");
  }
  return a;
}

// Generates the default family and pretrains both regimes for one master seed.
void prepare_seed(int seed) {
  const std::string s = std::to_string(seed);
  cli({"generate", "--out", data_dir(seed), "--seed", s});
  for (const std::string regime : {"meta", "multi"}) {
    std::vector<std::string> args{"pretrain", "--out", ckpt_dir(regime, seed), "--regime", regime, "--seed", s,
                                  "--steps", "2000", "--checkpoint-every", "200"};
    for (const auto& a : source_args(seed)) args.push_back(a);
    cli(args);
  }
}

// Limited-split fine-tune with the default budget, then beam-20 test CER.
double target_cer(int seed, int target, const std::string& start) {
  const std::string s = std::to_string(seed);
  const std::string corpus = data_dir(seed) + "/tgt" + std::to_string(target) + ".jsonl";
  const std::string ft = (g_root / "ft").string(), ev = (g_root / "ev").string();
  std::vector<std::string> args{"finetune", "--out", ft, "--corpus", corpus, "--split", "limited", "--seed", s};
  if (start == "none") {
    args.push_back("--no-pretrain");
  } else {
    args.push_back("--checkpoint");
    args.push_back(ckpt_dir(start, seed) + "/" + start + "-step002000");
  }
  cli(args);
  cli({"evaluate", "--out", ev, "--checkpoint", ft + "/finetuned", "--corpus", corpus});
  return read_json(fs::path(ev) / "eval_report.json").at("cer").get<double>();
}

// --- criteria ----------------------------------------------------------------------------

Outcome monolingual_learnability() {
  const auto t0 = Clock::now();
  SyntheticFamilyConfig c;
  c.noise_sigma = 0.0;
  const LanguageTask task = generate_family(c).at(c.n_source);
  MultiHeadModel scratch = init_model(default_encoder_config(c.feature_dim), derive_seed(c.seed, "no-pretrain"));
  FinetuneConfig fc;
  fc.epochs = 300;
  fc.eval_beam = 1;
  const FinetuneResult res = finetune(scratch, task, "full", fc);
  int first_below = 0;
  for (const auto& e : res.epochs)
    if (e.valid_cer < 5.0) {
      first_below = e.epoch;
      break;
    }
  const double cer = evaluate(res.model, task.id, task.test, kDefaultBeam).cer;
  const double secs = seconds_since(t0);
  return {cer < 5.0 && secs < 300.0, task.id + " (" + std::to_string(task.full.size()) + " utterances): test CER " +
                                         fmt(cer) + "% after 300 epochs, first below 5% at epoch " +
                                         std::to_string(first_below) + "; runtime " + fmt(secs, 1) + "s < 300s"};
}

Outcome transfer_trend() {
  const auto t0 = Clock::now();
  std::map<std::string, std::vector<double>> per_seed;
  for (int seed : kSeeds) {
    prepare_seed(seed);
    for (const std::string start : {"meta", "multi", "none"}) {
      double sum = 0.0;
      for (int t = 0; t < kTargets; ++t) sum += target_cer(seed, t, start);
      per_seed[start].push_back(sum / kTargets);
    }
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const double meta = mean(per_seed["meta"]), multi = mean(per_seed["multi"]), none = mean(per_seed["none"]);
  bool strict = true;
  std::string seeds;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    strict = strict && per_seed["meta"][i] < per_seed["none"][i];
    seeds += " seed" + std::to_string(kSeeds[i]) + "=" + fmt(per_seed["meta"][i], 2) + "/" +
             fmt(per_seed["multi"][i], 2) + "/" + fmt(per_seed["none"][i], 2);
  }
  const double secs = seconds_since(t0);
  const bool ok = meta <= multi && multi <= none && strict && secs < 1800.0;
  return {ok, "mean CER meta " + fmt(meta) + " multi " + fmt(multi) + " no-pretrain " + fmt(none) + " [meta<=multi " +
                  (meta <= multi ? "yes" : "no") + ", multi<=none " + (multi <= none ? "yes" : "no") +
                  ", meta<none every seed " + (strict ? "yes" : "no") + "] per seed meta/multi/none:" + seeds +
                  "; runtime " + fmt(secs, 1) + "s < 1800s"};
}

std::vector<double> curve_points(const std::string& regime, int seed, std::vector<int>* steps) {
  const fs::path dir = g_root / ("curve_" + regime);
  fs::create_directories(dir);
  for (int step : {200, 600, 1000, 1400, 2000})
    for (const char* ext : {".params", ".json"}) {
      const std::string name = cli::checkpoint_name(regime, step) + ext;
      fs::copy_file(fs::path(ckpt_dir(regime, seed)) / name, dir / name, fs::copy_options::overwrite_existing);
    }
  const fs::path out = g_root / ("curve_out_" + regime);
  cli({"curve", "--out", out.string(), "--checkpoints", dir.string(), "--corpus", data_dir(seed) + "/tgt0.jsonl",
       "--seed", std::to_string(seed)});
  std::ifstream is(out / "curve.csv");
  std::string line;
  std::getline(is, line);
  std::vector<double> cers;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string step, reg, name, cer;
    std::getline(ss, step, ',');
    std::getline(ss, reg, ',');
    std::getline(ss, name, ',');
    std::getline(ss, cer, ',');
    if (reg == "none") continue;
    steps->push_back(std::stoi(step));
    cers.push_back(std::stod(cer));
  }
  return cers;
}

Outcome curve_shape() {
  // Reuses the seed-1 pretraining runs from the transfer experiment.
  if (!fs::exists(fs::path(ckpt_dir("meta", 1)) / "meta-step002000.params")) prepare_seed(1);
  std::vector<int> meta_steps, multi_steps;
  const std::vector<double> meta = curve_points("meta", 1, &meta_steps);
  const std::vector<double> multi = curve_points("multi", 1, &multi_steps);
  auto show = [](const std::vector<int>& steps, const std::vector<double>& cers) {
    std::string s;
    for (std::size_t i = 0; i < cers.size(); ++i) s += " " + std::to_string(steps[i]) + ":" + fmt(cers[i], 2);
    return s;
  };
  const bool ok = meta.size() == 5 && meta.back() <= meta.front();
  const double best_early = *std::min_element(multi.begin(), multi.end() - 1);
  const bool degrades = multi.back() > best_early;
  return {ok, "tgt0 best valid CER, meta" + show(meta_steps, meta) + " (final <= first: " +
                  (ok ? "yes" : "no") + "); multi" + show(multi_steps, multi) +
                  " (late degradation, final above best earlier point: " + (degrades ? "yes" : "no") + ", reported only)"};
}

// Runs every command into `dir` from a small family.
void run_every_command(const fs::path& dir) {
  const std::string d = (dir / "data").string();
  cli({"generate", "--out", d, "--utterances", "40", "--seed", "7"});
  std::vector<std::string> src;
  for (int i = 0; i < 3; ++i) {
    src.push_back("--corpus");
    src.push_back(d + "/src" + std::to_string(i) + ".jsonl");
  }
  for (const std::string regime : {"meta", "multi"}) {
    std::vector<std::string> args{"pretrain", "--out", (dir / regime).string(), "--regime", regime, "--steps", "40",
                                  "--checkpoint-every", "20", "--hidden-dim", "16", "--seed", "7"};
    args.insert(args.end(), src.begin(), src.end());
    cli(args);
  }
  const std::string tgt = d + "/tgt0.jsonl";
  cli({"finetune", "--out", (dir / "ft").string(), "--checkpoint", (dir / "meta/meta-step000040").string(),
       "--corpus", tgt, "--epochs", "4", "--seed", "7"});
  cli({"finetune", "--out", (dir / "ft_none").string(), "--no-pretrain", "--hidden-dim", "16", "--corpus", tgt,
       "--epochs", "4", "--seed", "7"});
  cli({"evaluate", "--out", (dir / "ev").string(), "--checkpoint", (dir / "ft/finetuned").string(), "--corpus", tgt});
  cli({"curve", "--out", (dir / "curve").string(), "--checkpoints", (dir / "multi").string(), "--corpus", tgt,
       "--epochs", "3", "--seed", "7"});
  std::ostringstream sink;
  const char* argv[] = {"metasr", "selfcheck", "--out", nullptr};
  const std::string sc = (dir / "selfcheck").string();
  argv[3] = sc.c_str();
  if (cli::run(4, argv, sink, sink) != cli::kExitOk) throw std::runtime_error("selfcheck failed");
}

std::map<std::string, std::string> outputs(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == cli::kLockFile) continue;
    std::string text = slurp(e.path());
    // Paths inside configs and reports name the run directory itself.
    for (std::size_t at; (at = text.find(dir.string())) != std::string::npos;)
      text.replace(at, dir.string().size(), "<run>");
    files[fs::relative(e.path(), dir).string()] = text;
  }
  return files;
}

Outcome determinism() {
  const fs::path a = g_root / "det_a", b = g_root / "det_b";
  run_every_command(a);
  run_every_command(b);
  const auto fa = outputs(a), fb = outputs(b);
  std::vector<std::string> differing;
  for (const auto& [name, text] : fa) {
    auto it = fb.find(name);
    if (it == fb.end() || it->second != text) differing.push_back(name);
  }
  if (fa.size() != fb.size()) differing.push_back("(file sets differ)");
  // selfcheck.json carries no timings, so it is compared like everything else.
  std::string detail = std::to_string(fa.size()) + " output files from generate, pretrain (meta, multi), finetune, "
                       "evaluate, curve, selfcheck compared byte for byte";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {differing.empty() && !fa.empty(), detail};
}

}  // namespace

int main() {
  g_root = fs::temp_directory_path() / ("metasr_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(g_root);
  fs::create_directories(g_root);
  selfcheck::Options opt;

  report(1, "CTC forward equals brute-force path sum", [&] {
    const auto t0 = Clock::now();
    auto r = selfcheck::check_ctc_brute_force(opt, 500, 1e-10);
    return checks_outcome({r}, seconds_since(t0), 10.0);
  });
  report(2, "gradients match central finite differences", [&] {
    const auto t0 = Clock::now();
    std::vector<selfcheck::CheckResult> rs{selfcheck::check_ctc_gradient(opt, 20, 1e-6),
                                           selfcheck::check_layer_gradients(opt, 20, 1e-6),
                                           selfcheck::check_end_to_end_gradient(opt, 20, 1e-5)};
    return checks_outcome(rs, seconds_since(t0), 60.0);
  });
  report(3, "first-order meta-gradient consistency", [&] {
    const auto t0 = Clock::now();
    std::vector<selfcheck::CheckResult> rs{selfcheck::check_fomaml_zero_inner_lr(opt),
                                           selfcheck::check_fomaml_linear(opt), selfcheck::check_fomaml_scalar(opt)};
    return checks_outcome(rs, seconds_since(t0));
  });
  report(4, "decoder exactness", [&] {
    const auto t0 = Clock::now();
    std::vector<selfcheck::CheckResult> rs{selfcheck::check_beam_exact(opt), selfcheck::check_beam_one_greedy(opt)};
    return checks_outcome(rs, seconds_since(t0));
  });
  report(5, "monolingual learnability on a noiseless language", monolingual_learnability);
  report(6, "transfer trend meta <= multi <= no-pretrain over 3 seeds", transfer_trend);
  report(7, "pretraining curve shape", curve_shape);
  report(8, "every command is bit-reproducible", determinism);

  fs::remove_all(g_root);
  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
