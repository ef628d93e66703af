#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "calib/error.hpp"
#include "calib/experiment.hpp"
#include "oracles.hpp"

using namespace calib;
using nlohmann::json;
namespace fs = std::filesystem;
namespace m = calib::method;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("calib_test_" + name);
    fs::remove_all(p);
    return p;
}

json small_config(const fs::path& out) {
    json j = json::parse(R"({
      "dataset": {"gaussian_mixture": {"samples_per_class": 60, "seed": 1}},
      "split": {"train": 0.8, "val": 0.1, "test": 0.1, "seed": 2},
      "train": {"epochs": 3, "batch_size": 16, "hidden": [8]},
      "methods": [{"name": "ce"}],
      "seeds": [0],
      "metrics": {"bin_count": 5}
    })");
    j["output_dir"] = out.string();
    return j;
}

SweepConfig sweep(std::optional<ClassIndex> target, SweepAxis axis, SweepBranch branch, double from, double to,
                  std::size_t steps) {
    SweepConfig c;
    c.target = target;
    c.axis = axis;
    c.branch = branch;
    c.from = from;
    c.to = to;
    c.steps = steps;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("method specs from JSON and strings") {
    const auto a = method_from_json(json{{"name", "acls"}, {"lambda1", 0.2}, {"margin", 3}}, 10.0);
    const auto& acls = std::get<m::Acls>(a);
    CHECK(acls.lambda1 == 0.2);
    CHECK(acls.lambda2 == 0.01);
    CHECK(acls.margin == 3.0);
    CHECK(std::get<m::Acls>(method_from_json(json{{"name", "acls"}}, 6.0)).margin == 6.0);
    CHECK(std::get<m::Mbls>(parse_method_string("mbls", 10.0)).margin == 10.0);
    CHECK(std::get<m::LabelSmoothing>(parse_method_string("ls:epsilon=0.05", 10.0)).epsilon == 0.05);
    CHECK_THROWS_AS(method_from_json(json{{"name", "acls"}, {"lamda1", 0.2}}, 10.0), ConfigError);
    CHECK_THROWS_AS(method_from_json(json{{"name", "nope"}}, 10.0), ConfigError);
    CHECK_THROWS_AS(method_from_json(json{{"name", "acls"}, {"margin", "x"}}, 10.0), ConfigError);
    CHECK_THROWS_AS(method_from_json(json{{"name", "acls"}, {"margin", -1}}, 10.0), ConfigError);
    CHECK_THROWS_AS(parse_method_string("acls:margin", 10.0), ConfigError);
    CHECK_THROWS_AS(parse_method_string("acls:margin=abc", 10.0), ConfigError);
    CHECK(profile_margin("default") == 10.0);
    CHECK(profile_margin("cifar10") == 6.0);
    CHECK_THROWS_AS(profile_margin("imagenet"), ConfigError);

    for (const auto& spec : oracle::all_methods()) {
        const auto j = method_to_json(spec);
        CHECK(method_to_json(method_from_json(j, 10.0)) == j);
    }
}

TEST_CASE("config parsing") {
    const auto out = scratch("cfg");
    const auto cfg = parse_config(small_config(out));
    CHECK(cfg.methods.size() == 1);
    CHECK(cfg.methods[0].label == "ce");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{0});
    CHECK(cfg.bin_count == 5);
    CHECK(cfg.train.bin_count == 5);
    CHECK(cfg.train.epochs == 3);
    CHECK(cfg.output_dir == out);

    auto bad = small_config(out);
    bad["trian"] = json::object();
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["train"]["lambda1"] = 0.1;
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["methods"] = json::array();
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["seeds"] = json::array();
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["methods"] = json::array({{{"name", "ce"}}, {{"name", "ce"}}});
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["metrics"]["bin_count"] = 0;
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["train"]["epochs"] = 0;
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["dataset"] = json{{"csv", "a.csv"}, {"gaussian_mixture", json::object()}};
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    bad = small_config(out);
    bad["methods"] = json::array({{{"name", "ce"}, {"label", "a/b"}}});
    CHECK_THROWS_AS(parse_config(bad), ConfigError);

    auto prof = small_config(out);
    prof["profile"] = "cifar10";
    prof["methods"] = json::array({{{"name", "acls"}}});
    CHECK(std::get<m::Acls>(parse_config(prof).methods[0].spec).margin == 6.0);

    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
    const auto notjson = scratch("notjson.json");
    std::ofstream(notjson) << "{ nope";
    CHECK_THROWS_AS(load_config(notjson), ConfigError);
}

TEST_CASE("single run experiment") {
    const auto out = scratch("single");
    const auto cfg = parse_config(small_config(out));
    const auto s = run_experiment(cfg, 1);
    REQUIRE(s.runs.size() == 1);
    CHECK(s.runs[0].ok);
    CHECK_FALSE(s.any_failed());
    REQUIRE(s.aggregates.size() == 1);
    CHECK(s.aggregates[0].runs == 1);
    CHECK(s.aggregates[0].test_ece.mean == s.runs[0].test.ece);
    CHECK(s.aggregates[0].test_ece.stddev == 0.0);
    CHECK(s.aggregates[0].val_accuracy.mean == s.runs[0].val.accuracy);

    for (const char* f : {"summary.json", "reliability_ce_0.csv", "trace_ce_0.csv", "activity_ce_0.csv",
                          "logits_ce_0.csv"}) {
        CHECK(fs::exists(out / f));
    }
    const json doc = json::parse(slurp(out / "summary.json"));
    CHECK_FALSE(schema_violation(doc, summary_schema()).has_value());
    CHECK(doc["bin_count"] == 5);
    const auto trace = slurp(out / "trace_ce_0.csv");
    CHECK(trace.rfind("epoch,train_loss,val_ece\n1,", 0) == 0);
    std::size_t lines = 0;
    for (char ch : slurp(out / "reliability_ce_0.csv")) lines += ch == '\n';
    CHECK(lines == 6);
}

TEST_CASE("experiments are reproducible byte for byte") {
    auto cfg_json = small_config(scratch("rep_a"));
    cfg_json["methods"] = json::array({{{"name", "ce"}}, {{"name", "acls"}, {"margin", 1}}, {{"name", "crl"}}});
    cfg_json["seeds"] = json::array({0, 1});
    auto cfg_a = parse_config(cfg_json);
    auto cfg_b = cfg_a;
    cfg_b.output_dir = scratch("rep_b");
    run_experiment(cfg_a, 1);
    run_experiment(cfg_b, 3);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(cfg_a.output_dir)) {
        const auto name = e.path().filename();
        ++files;
        if (name == "summary.json") {
            auto a = json::parse(slurp(e.path())), b = json::parse(slurp(cfg_b.output_dir / name));
            a.erase("generated_at");
            b.erase("generated_at");
            CHECK(a.dump() == b.dump());
        } else {
            CHECK(slurp(e.path()) == slurp(cfg_b.output_dir / name));
        }
    }
    CHECK(files == 1 + 4 * 6);
}

TEST_CASE("diverged runs are recorded without stopping the rest") {
    auto j = small_config(scratch("diverge"));
    j["train"]["learning_rate"] = 1e300;
    auto cfg = parse_config(j);
    const auto s = run_experiment(cfg, 1);
    CHECK(s.any_failed());
    CHECK(s.runs[0].diverged_epoch == 1);
    const json doc = json::parse(slurp(cfg.output_dir / "summary.json"));
    CHECK(doc["runs"][0]["status"] == "error");
    CHECK(doc["aggregates"][0]["runs_ok"] == 0);
    CHECK_FALSE(schema_violation(doc, summary_schema()).has_value());
}

TEST_CASE("unwritable output directory is an IO error") {
    const auto blocker = scratch("blocker");
    std::ofstream(blocker) << "x";
    auto cfg = parse_config(small_config(blocker / "sub"));
    CHECK_THROWS_AS(run_experiment(cfg, 1), IoError);
}

TEST_CASE("schema validator") {
    const ExperimentSummary empty;
    json doc = summary_to_json(empty, 15, "2026-01-01T00:00:00Z");
    CHECK_FALSE(schema_violation(doc, summary_schema()).has_value());
    json extra = doc;
    extra["surprise"] = 1;
    CHECK(schema_violation(extra, summary_schema()).has_value());
    json missing = doc;
    missing.erase("runs");
    CHECK(schema_violation(missing, summary_schema()).has_value());
    json wrong = doc;
    wrong["bin_count"] = "15";
    CHECK(schema_violation(wrong, summary_schema()).has_value());
    json version = doc;
    version["schema_version"] = 2;
    CHECK(schema_violation(version, summary_schema()).has_value());
}

TEST_CASE("anatomy table and sweeps") {
    const auto a = anatomy(m::Acls{0.1, 0.01, 1.0}, LogitVector{2.0, 0.0, -1.0}, 0, std::nullopt, sweep(std::nullopt, SweepAxis::logit, SweepBranch::automatic, 0, 0, 0));
    CHECK(a.decomposition.yhat == 0);
    CHECK(a.decomposition.reg_grad[0] == doctest::Approx(0.2));
    CHECK(a.decomposition.reg_grad[1] == doctest::Approx(-0.01));
    CHECK(a.decomposition.reg_grad[2] == doctest::Approx(-0.02));
    CHECK(a.sweep.empty());
    std::ostringstream table;
    write_anatomy_table(table, a);
    CHECK(table.str().rfind("class,z,p,f,indicator,reg_grad,total_grad\n0*,2,", 0) == 0);

    const auto p = sweep(std::nullopt, SweepAxis::probability, SweepBranch::yhat, 0.05, 0.95, 91);
    const auto md = anatomy(m::Mdca{0.1, 0.01}, LogitVector{1.0, 0.0, -0.5}, 0, std::nullopt, p);
    REQUIRE(md.sweep.size() == 91);
    std::size_t peak = 0;
    for (std::size_t i = 0; i < md.sweep.size(); ++i) {
        CHECK(md.sweep[i].p == doctest::Approx(md.sweep[i].x).epsilon(1e-12));
        if (md.sweep[i].f > md.sweep[peak].f) peak = i;
    }
    CHECK(md.sweep[peak].x == doctest::Approx(0.5));

    const auto l = sweep(std::nullopt, SweepAxis::logit, SweepBranch::automatic, -5, 5, 41);
    const auto mb = anatomy(m::Mbls{0.1, 2.0}, LogitVector{5.0, 2.0, 0.0}, 0, std::nullopt, l);
    CHECK(mb.decomposition.reg_grad[mb.decomposition.yhat] == 0.0);
    for (const auto& pt : mb.sweep) {
        if (pt.yhat == 0) CHECK(pt.reg_grad == 0.0);
    }
    std::ostringstream csv;
    write_sweep_csv(csv, mb.sweep);
    CHECK(csv.str().rfind("x,z,p,yhat,f,indicator,reg_grad,total_grad\n-5,-5,", 0) == 0);

    // ACLS smoothing at the prediction grows linearly with the swept logit.
    const auto up = sweep(0, SweepAxis::logit, SweepBranch::yhat, 4, 8, 5);
    const auto ac = anatomy(m::Acls{0.1, 0.01, 1.0}, LogitVector{2.0, 0.0, -1.0}, 0, std::nullopt, up);
    for (std::size_t i = 1; i < ac.sweep.size(); ++i) {
        CHECK(ac.sweep[i].f - ac.sweep[i - 1].f == doctest::Approx(0.1));
    }

    CHECK_THROWS_AS(anatomy(m::Crl{}, LogitVector{1.0, 0.0}, 0, std::nullopt, {}), InvalidInput);
    CHECK_THROWS_AS(anatomy(m::Acls{}, LogitVector{1.0, 0.0}, 0, std::nullopt, sweep(5, SweepAxis::logit, SweepBranch::automatic, 0, 1, 3)), InvalidInput);
    const auto out_of_range = sweep(std::nullopt, SweepAxis::probability, SweepBranch::automatic, 0.0, 1.0, 3);
    CHECK_THROWS_AS(anatomy(m::Acls{}, LogitVector{1.0, 0.0}, 0, std::nullopt, out_of_range), InvalidInput);
}

TEST_CASE("regularizer histograms") {
    const std::vector<double> zeros(40, 0.0);
    const auto h0 = reg_histogram(zeros);
    REQUIRE(h0.size() == 20);
    CHECK(h0[0].count == 40);
    CHECK(first_bin_share(h0) == 1.0);
    CHECK(h0[0].lower == 0.0);
    CHECK(h0[19].upper == 0.1);

    oracle::Gen gen(71);
    std::vector<double> v(1000);
    for (auto& x : v) x = gen.uniform(-0.05, 0.2);
    v.push_back(0.005);  // exactly on an edge goes to the upper bin
    v.push_back(0.1);
    const auto h = reg_histogram(v);
    std::size_t total = 0;
    for (const auto& b : h) total += b.count;
    CHECK(total == v.size());
    std::size_t above = 0, below = 0;
    for (double x : v) {
        above += x >= 0.095;
        below += x < 0.005;
    }
    CHECK(h[19].count == above);
    CHECK(h[0].count == below);
    CHECK_THROWS_AS(reg_histogram(v, 0), InvalidInput);
    CHECK(first_bin_share(std::vector<HistogramBin>(3)) == 0.0);
}

TEST_CASE("histograms from a run directory") {
    const auto out = scratch("hist");
    auto j = small_config(out);
    j["methods"] = json::array({{{"name", "ce"}}, {{"name", "acls"}, {"margin", 1}}});
    run_experiment(parse_config(j), 1);
    const auto hs = reg_histogram_dir(out);
    REQUIRE(hs.size() == 2);
    CHECK(hs[0].first == "acls_0");
    CHECK(hs[1].first == "ce_0");
    CHECK(first_bin_share(hs[1].second) == 1.0);
    CHECK(fs::exists(out / "reg_hist_ce_0.csv"));
    CHECK(slurp(out / "reg_hist_ce_0.csv").rfind("bin_lower,bin_upper,count\n0,0.0050000000000000001,", 0) == 0);
    CHECK_THROWS_AS(reg_histogram_dir(scratch("empty_dir_missing")), IoError);
    const auto empty = scratch("empty_dir");
    fs::create_directories(empty);
    CHECK_THROWS_AS(reg_histogram_dir(empty), IoError);
}

TEST_CASE("logits CSV and post-hoc temperature scaling") {
    LogitsTable t;
    const auto val = oracle::exactly_calibrated(3.0);
    t.val_logits = val.logits;
    t.val_labels = val.labels;
    const auto test = oracle::exactly_calibrated(3.0);
    t.test_logits = test.logits;
    t.test_labels = test.labels;

    std::stringstream buf;
    write_logits_csv(buf, t);
    const auto back = read_logits_csv(buf);
    CHECK(back.val_logits == t.val_logits);
    CHECK(back.test_labels == t.test_labels);

    const auto r = posthoc_ts(t);
    const TemperatureGrid g{};
    const double step = std::pow(g.t_max / g.t_min, 1.0 / (g.steps - 1));
    CHECK(std::abs(std::log(r.temperature / 3.0)) <= std::log(step) * (1 + 1e-9));
    CHECK(r.val_nll_after <= r.val_nll_before);
    REQUIRE(r.test_before.has_value());
    CHECK(r.test_before->accuracy == r.test_after->accuracy);
    CHECK(r.test_after->ece < r.test_before->ece);
    const auto j = temperature_report_to_json(r);
    CHECK(j["temperature"] == r.temperature);

    LogitsTable no_val;
    no_val.test_logits = t.test_logits;
    no_val.test_labels = t.test_labels;
    CHECK_THROWS_AS(posthoc_ts(no_val), InvalidInput);

    std::istringstream bad("split,z0,z1,label\ntrain,1,2,0\n");
    CHECK_THROWS_AS(read_logits_csv(bad), ParseError);
    std::istringstream hdr("z0,z1,label\n");
    CHECK_THROWS_AS(read_logits_csv(hdr), SchemaError);
    std::istringstream lab("split,z0,z1,label\nval,1,2,2\n");
    CHECK_THROWS_AS(read_logits_csv(lab), ParseError);
}
