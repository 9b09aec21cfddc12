#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "xmmp/runner.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "xmmp_cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = xmmp::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

// Fresh scratch directory per test case.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("xmmp_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& s) const { return (dir / s).string(); }
};

const std::vector<std::string> kTiny{"--hidden", "8",      "--ffn",    "16", "--fusion-hidden", "8",
                                     "--layers", "1",      "--heads",  "2",  "--epochs",        "2",
                                     "--batch-size", "16"};

void synth(const Scratch& s, const std::string& seed = "3") {
  const auto r = cli({"synth", "--out", s / "d", "--records", "100", "--positive-rate", "0.3", "--seed", seed,
                      "--hours", "6", "--vital-steps", "8", "--note-words", "8"});
  REQUIRE(r.code == 0);
}

Result train(const Scratch& s, const std::string& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{"train", "--data", s / "d", "--out", out};
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  args.insert(args.end(), extra.begin(), extra.end());
  return cli(args);
}

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"train", "--help"}).code == 0);
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  const auto r = cli({"synth", "--out", "x", "--no-such-flag"});
  CHECK(r.code == 1);
  CHECK(r.err.find("no-such-flag") != std::string::npos);
  CHECK(cli({"synth"}).code == 1);
}

TEST_CASE("synth writes dataset, ground truth, manifest and log") {
  Scratch s("synth");
  synth(s);
  CHECK(fs::is_regular_file(s / "d/dataset.bin"));
  const auto gt = nlohmann::json::parse(slurp(s / "d/ground_truth.json"));
  CHECK(gt.at("records").size() == 100);
  const auto manifest = nlohmann::json::parse(slurp(s / "d/manifest.json"));
  CHECK(manifest.at("synth").at("seed") == 3);
  CHECK(manifest.at("synth").contains("version"));
  CHECK(manifest.at("synth").at("config").get<std::string>().find("records=100") != std::string::npos);
  for (const auto& l : lines(s / "d/log.jsonl")) CHECK_NOTHROW(nlohmann::json::parse(l));
  CHECK(cli({"synth", "--out", s / "e", "--planting", "sideways"}).code == 1);
  CHECK(cli({"synth", "--out", s / "e", "--positive-rate", "0"}).code == 1);
}

TEST_CASE("train then eval gives a metrics csv") {
  Scratch s("train");
  synth(s);
  const auto t = train(s, s / "m");
  REQUIRE(t.code == 0);
  CHECK(fs::is_regular_file(s / "m/model.ckpt"));
  CHECK(lines(s / "m/history.csv").size() == 3);
  const auto e = cli({"eval", "--model", s / "m", "--data", s / "d", "--out", s / "run"});
  REQUIRE(e.code == 0);
  const auto m = lines(s / "run/metrics.csv");
  REQUIRE(m.size() == 2);
  CHECK(m[0] == "split,records,positives,auc_roc,auc_pr");
  CHECK(m[1].rfind("test,20,", 0) == 0);
  CHECK(lines(s / "run/scores.csv").size() == 21);
  CHECK(cli({"eval", "--model", s / "m", "--data", s / "d", "--out", s / "run", "--split", "all"}).code == 0);
  CHECK(cli({"eval", "--model", s / "m", "--data", s / "d", "--out", s / "run", "--split", "some"}).code == 1);
}

TEST_CASE("missing or malformed inputs are data errors") {
  Scratch s("missing");
  CHECK(cli({"train", "--data", s / "nothing", "--out", s / "m"}).code == 2);
  CHECK(cli({"eval", "--model", s / "nothing", "--data", s / "nothing", "--out", s / "r"}).code == 2);
  std::ofstream(s / "bad.bin") << "not a dataset";
  CHECK(cli({"train", "--data", s / "bad.bin", "--out", s / "m"}).code == 2);
}

TEST_CASE("option values out of range are usage errors") {
  Scratch s("range");
  synth(s);
  CHECK(train(s, s / "m", {"--positive-weight", "5"}).code == 1);
  CHECK(train(s, s / "m", {"--fold", "7"}).code == 1);
  CHECK(train(s, s / "m", {"--modalities", "events+smell"}).code == 1);
}

TEST_CASE("ini configuration with flag override") {
  Scratch s("ini");
  synth(s);
  std::ofstream(s / "c.ini") << "[train]\nepochs=1\nhidden=8\nffn=16\nfusion-hidden=8\nlayers=1\nheads=2\n";
  REQUIRE(cli({"train", "--config", s / "c.ini", "--data", s / "d", "--out", s / "a"}).code == 0);
  CHECK(lines(s / "a/history.csv").size() == 2);
  REQUIRE(cli({"train", "--config", s / "c.ini", "--data", s / "d", "--out", s / "b", "--epochs", "3"}).code == 0);
  CHECK(lines(s / "b/history.csv").size() == 4);
  CHECK(cli({"train", "--config", s / "absent.ini", "--data", s / "d", "--out", s / "c"}).code == 1);
}

TEST_CASE("identical seeds give byte-identical metrics") {
  Scratch s("repro");
  synth(s);
  REQUIRE(train(s, s / "m1", {"--dropout", "0.3"}).code == 0);
  REQUIRE(train(s, s / "m2", {"--dropout", "0.3"}).code == 0);
  CHECK(slurp(s / "m1/model.ckpt") == slurp(s / "m2/model.ckpt"));
  REQUIRE(cli({"eval", "--model", s / "m1", "--data", s / "d", "--out", s / "r1"}).code == 0);
  REQUIRE(cli({"eval", "--model", s / "m2", "--data", s / "d", "--out", s / "r2"}).code == 0);
  CHECK(slurp(s / "r1/metrics.csv") == slurp(s / "r2/metrics.csv"));
  REQUIRE(train(s, s / "m3", {"--dropout", "0.3", "--seed", "9"}).code == 0);
  CHECK(slurp(s / "m1/model.ckpt") != slurp(s / "m3/model.ckpt"));
}

TEST_CASE("explain, perturb and report") {
  Scratch s("pipeline");
  synth(s);
  REQUIRE(train(s, s / "m").code == 0);
  const std::string run = s / "run";

  // Report before perturbation outputs exist names the missing file.
  const auto early = cli({"report", "--run", s / "m"});
  CHECK(early.code == 2);
  CHECK(early.err.find("au_summary.csv") != std::string::npos);

  REQUIRE(cli({"explain", "--model", s / "m", "--data", s / "d", "--out", run, "--explainers", "lrptrans",
               "integrated-gradients", "--min-token-count", "1"})
              .code == 0);
  CHECK(fs::is_regular_file(run + "/features_lrptrans.json"));
  CHECK(fs::is_regular_file(run + "/features_integrated-gradients.json"));
  CHECK(lines(run + "/reports.jsonl").size() == 40);
  CHECK(lines(run + "/attributions.csv").front() == "record_id,explainer,modality,feature_id,time_index,attribution");
  CHECK(cli({"explain", "--model", s / "m", "--data", s / "d", "--out", run, "--explainers", "shap"}).code == 1);

  REQUIRE(cli({"perturb", "--model", s / "m", "--data", s / "d", "--out", run, "--explainers", "all"}).code == 0);
  const auto summary = lines(run + "/au_summary.csv");
  CHECK(summary.size() == 7);
  CHECK(summary[0] == "explainer,au");
  CHECK(lines(run + "/curves.csv").size() == 61);

  const auto r = cli({"report", "--run", run});
  REQUIRE(r.code == 0);
  const std::string md = slurp(run + "/report.md");
  CHECK(md.find("| lrptrans |") != std::string::npos);
  CHECK(md.find("### lrptrans") != std::string::npos);
  CHECK(md.find("Top positive events") != std::string::npos);
  CHECK(fs::is_regular_file(run + "/heat_tables.csv"));

  // The events table passes the aggregate through unchanged.
  const auto features = nlohmann::json::parse(slurp(run + "/features_lrptrans.json"));
  for (const auto& e : features.at("events")) {
    if (e.at("mean").get<double>() > 0.0) {
      CHECK(md.find("| " + e.at("name").get<std::string>() + " |") != std::string::npos);
      break;
    }
  }

  // One explainer: one AU row.
  const std::string one = s / "one";
  REQUIRE(cli({"perturb", "--model", s / "m", "--data", s / "d", "--out", one, "--explainers", "random",
               "--fractions", "0", "0.5"})
              .code == 0);
  REQUIRE(cli({"report", "--run", one}).code == 0);
  const std::string md1 = slurp(one + "/report.md");
  CHECK(md1.find("| random |") != std::string::npos);
  CHECK(md1.find("| lrptrans |") == std::string::npos);

  const auto manifest = nlohmann::json::parse(slurp(run + "/manifest.json"));
  CHECK(manifest.contains("explain"));
  CHECK(manifest.contains("perturb"));
}

TEST_CASE("cross-validation writes per-fold rows") {
  Scratch s("cv");
  synth(s);
  REQUIRE(train(s, s / "cv", {"--cross-validate", "--folds", "3", "--seeds", "1", "2"}).code == 0);
  const auto rows = lines(s / "cv/cv.csv");
  CHECK(rows.size() == 7);
  CHECK(rows[0].find("auc_pr") != std::string::npos);
  CHECK(lines(s / "cv/cv_summary.csv").size() == 3);
}

TEST_CASE("preprocess raw exports") {
  Scratch s("prep");
  {
    std::ofstream ev(s / "events.csv");
    ev << "stay_id,time,feature,value\n";
    for (int id : {1, 2, 3}) {
      ev << id << ",0.5,Glucose,110\n" << id << ",3.2,Heart Rate,90\n";
    }
    ev << "4,1.0,Glucose,100\n";
    std::ofstream nt(s / "notes.jsonl");
    nt << R"({"stay_id":1,"time":1.0,"text":"stable overnight, stable","category":"Nursing","iserror":false})" << '\n'
       << R"({"stay_id":2,"time":2.0,"text":"stable, dying","category":"Nursing","iserror":false})" << '\n'
       << R"({"stay_id":3,"time":2.0,"text":"died","category":"Nursing","iserror":false})" << '\n';
    std::ofstream vt(s / "vitals.csv");
    vt << "stay_id,channel,time,value\n";
    const char* channels[] = {"HR",      "PULSE",   "SpO2",    "RESP",  "ABPSys", "ABPDias", "ABPMean",
                              "NBPSys",  "NBPDias", "NBPMean", "PAPSys", "PAPDias", "PAPMean", "CVP",
                              "CO",      "CI",      "Temp",    "ST II", "ST V",    "PVC Rate", "ICP"};
    for (int id : {1, 2, 3}) {
      for (const char* c : channels) {
        // Stay 3 only covers the first six hours: rejected.
        const int bins = id == 3 ? 120 : 480;
        for (int b = 0; b < bins; ++b) vt << id << ',' << c << ',' << b * 0.05 << ",1\n";
      }
    }
    std::ofstream lb(s / "labels.csv");
    lb << "stay_id,label\n1,0\n2,1\n3,1\n4,0\n";
  }
  const auto r = cli({"preprocess", "--events", s / "events.csv", "--notes", s / "notes.jsonl", "--vitals",
                      s / "vitals.csv", "--labels", s / "labels.csv", "--out", s / "d", "--min-count", "1"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("2 matched records") != std::string::npos);
  CHECK(r.out.find("1 rejected") != std::string::npos);
  bool saw_empty_notes = false;
  for (const auto& l : lines(s / "d/log.jsonl")) {
    saw_empty_notes = saw_empty_notes || nlohmann::json::parse(l).at("event") == "empty_notes";
  }
  CHECK(saw_empty_notes);
  CHECK(cli({"preprocess", "--events", s / "none.csv", "--notes", s / "notes.jsonl", "--vitals", s / "vitals.csv",
             "--labels", s / "labels.csv", "--out", s / "d"})
            .code == 2);
}
