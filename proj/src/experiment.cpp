#include "calib/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "calib/error.hpp"

namespace calib {

using nlohmann::json;

namespace {

const char kSummarySchemaText[] =
#include "summary_schema.inc"
    ;

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

double get_number(const json& obj, const char* key, double fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
    return v.get<double>();
}

std::uint64_t get_count(const json& obj, const char* key, std::uint64_t fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError(where + "." + key + ": expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

template <class Fn>
auto as_config_error(Fn&& fn) {
    try {
        return fn();
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }
}

bool valid_label(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << content;
    out.close();
    if (!out) throw IoError("write failed: " + path.string());
}

json report_to_json(const CalibrationReport& r) {
    return {{"ece", r.ece}, {"aece", r.aece}, {"accuracy", r.accuracy}, {"nll", r.nll}};
}

json stats_to_json(const MetricStats& s) { return {{"mean", s.mean}, {"std", s.stddev}}; }

MetricStats stats_of(const std::vector<double>& xs) {
    MetricStats s;
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, std::size_t line) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
        throw ParseError(line, "malformed number '" + s + "'");
    }
    return v;
}

std::size_t parse_index(const std::string& s, std::size_t line) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
        throw ParseError(line, "malformed integer '" + s + "'");
    }
    return v;
}

bool getline_lf(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Method specs

double profile_margin(const std::string& profile) {
    if (profile == "default") return 10.0;
    if (profile == "cifar10") return 6.0;
    throw ConfigError("unknown hyperparameter profile '" + profile + "'");
}

MethodSpec method_from_json(const json& j, double default_margin) {
    if (!j.is_object() || !j.contains("name") || !j.at("name").is_string()) {
        throw ConfigError("method: expected an object with a string 'name'");
    }
    const std::string name = j.at("name").get<std::string>();
    const std::string where = "method " + name;
    MethodSpec spec;
    auto l1 = [&] { return get_number(j, "lambda1", 0.1, where); };
    auto l2 = [&] { return get_number(j, "lambda2", 0.01, where); };
    auto lam = [&] { return get_number(j, "lambda", 0.1, where); };
    auto margin = [&] { return get_number(j, "margin", default_margin, where); };

    if (name == "ce") {
        check_keys(j, {"name"}, where);
        spec = method::CrossEntropy{};
    } else if (name == "ls") {
        check_keys(j, {"name", "epsilon"}, where);
        spec = method::LabelSmoothing{get_number(j, "epsilon", 0.1, where)};
    } else if (name == "focal") {
        check_keys(j, {"name", "gamma"}, where);
        spec = method::Focal{get_number(j, "gamma", 3.0, where)};
    } else if (name == "flsd" || name == "cpc" || name == "mdca" || name == "crl") {
        check_keys(j, {"name", "lambda1", "lambda2"}, where);
        if (name == "flsd") spec = method::Flsd{l1(), l2()};
        if (name == "cpc") spec = method::Cpc{l1(), l2()};
        if (name == "mdca") spec = method::Mdca{l1(), l2()};
        if (name == "crl") spec = method::Crl{l1(), l2()};
    } else if (name == "mbls") {
        check_keys(j, {"name", "lambda", "margin"}, where);
        spec = method::Mbls{lam(), margin()};
    } else if (name == "acls" || name == "acls_ar_only" || name == "acls_ranking") {
        check_keys(j, {"name", "lambda1", "lambda2", "margin"}, where);
        if (name == "acls") spec = method::Acls{l1(), l2(), margin()};
        if (name == "acls_ar_only") spec = method::AclsAdaptiveOnly{l1(), l2(), margin()};
        if (name == "acls_ranking") spec = method::AclsRanking{l1(), l2(), margin()};
    } else if (name == "acls_cr_only") {
        check_keys(j, {"name", "lambda", "margin"}, where);
        spec = method::AclsConditionalOnly{lam(), margin()};
    } else {
        throw ConfigError("unknown method '" + name + "'");
    }
    as_config_error([&] {
        validate(spec);
        return 0;
    });
    return spec;
}

json method_to_json(const MethodSpec& spec) {
    json j = {{"name", method_name(spec)}};
    std::visit(Overloaded{
                   [](const method::CrossEntropy&) {},
                   [&](const method::LabelSmoothing& m) { j["epsilon"] = m.epsilon; },
                   [&](const method::Focal& m) { j["gamma"] = m.gamma; },
                   [&](const method::Mbls& m) {
                       j["lambda"] = m.lambda;
                       j["margin"] = m.margin;
                   },
                   [&](const method::AclsConditionalOnly& m) {
                       j["lambda"] = m.lambda;
                       j["margin"] = m.margin;
                   },
                   [&](const auto& m) {
                       j["lambda1"] = m.lambda1;
                       j["lambda2"] = m.lambda2;
                       if constexpr (requires { m.margin; }) j["margin"] = m.margin;
                   },
               },
               spec);
    return j;
}

MethodSpec parse_method_string(const std::string& text, double default_margin) {
    const auto colon = text.find(':');
    json j = {{"name", text.substr(0, colon)}};
    if (colon != std::string::npos) {
        std::istringstream ss(text.substr(colon + 1));
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto eq = item.find('=');
            if (eq == std::string::npos) throw ConfigError("method parameter '" + item + "' lacks '='");
            const std::string key = item.substr(0, eq);
            const std::string value = item.substr(eq + 1);
            try {
                j[key] = parse_double(value, 1);
            } catch (const ParseError&) {
                throw ConfigError("method parameter '" + key + "': malformed number '" + value + "'");
            }
        }
    }
    return method_from_json(j, default_margin);
}

// ---------------------------------------------------------------------------
// Config

ExperimentConfig parse_config(const json& j) {
    check_keys(j, {"dataset", "split", "train", "methods", "seeds", "metrics", "output_dir", "profile"},
               "config");
    ExperimentConfig cfg;

    double default_margin = 10.0;
    if (j.contains("profile")) {
        if (!j.at("profile").is_string()) throw ConfigError("config.profile: expected a string");
        default_margin = profile_margin(j.at("profile").get<std::string>());
    }

    if (!j.contains("dataset")) throw ConfigError("config: 'dataset' is required");
    const json& ds = j.at("dataset");
    check_keys(ds, {"gaussian_mixture", "csv"}, "dataset");
    if (ds.size() != 1) throw ConfigError("dataset: exactly one of 'gaussian_mixture' or 'csv'");
    if (ds.contains("csv")) {
        if (!ds.at("csv").is_string()) throw ConfigError("dataset.csv: expected a path string");
        cfg.dataset = std::filesystem::path(ds.at("csv").get<std::string>());
    } else {
        const json& g = ds.at("gaussian_mixture");
        const std::string where = "dataset.gaussian_mixture";
        check_keys(g, {"class_count", "dim", "means", "radius", "stddev", "samples_per_class", "label_noise", "seed"},
                   where);
        GaussianMixtureSpec spec;
        spec.class_count = get_count(g, "class_count", 3, where);
        spec.dim = get_count(g, "dim", 2, where);
        spec.stddev = get_number(g, "stddev", 0.9, where);
        spec.samples_per_class = get_count(g, "samples_per_class", 1500, where);
        spec.label_noise = get_number(g, "label_noise", 0.1, where);
        spec.seed = get_count(g, "seed", 0, where);
        if (g.contains("means") && g.contains("radius")) {
            throw ConfigError(where + ": give either 'means' or 'radius', not both");
        }
        if (g.contains("means")) {
            try {
                spec.means = g.at("means").get<std::vector<std::vector<double>>>();
            } catch (const json::exception&) {
                throw ConfigError(where + ".means: expected an array of number arrays");
            }
        } else {
            spec.means = as_config_error(
                [&] { return circle_means(spec.class_count, spec.dim, get_number(g, "radius", 1.2, where)); });
        }
        cfg.dataset = spec;
    }

    if (j.contains("split")) {
        const json& s = j.at("split");
        check_keys(s, {"train", "val", "test", "seed"}, "split");
        cfg.split.train = get_number(s, "train", cfg.split.train, "split");
        cfg.split.val = get_number(s, "val", cfg.split.val, "split");
        cfg.split.test = get_number(s, "test", cfg.split.test, "split");
        cfg.split_seed = get_count(s, "seed", 0, "split");
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        const std::string where = "train";
        check_keys(t, {"epochs", "batch_size", "learning_rate", "lr_decay_epochs", "lr_decay_factor",
                       "weight_decay", "hidden"},
                   where);
        cfg.train.epochs = static_cast<int>(get_count(t, "epochs", 100, where));
        cfg.train.batch_size = get_count(t, "batch_size", 64, where);
        cfg.train.learning_rate = get_number(t, "learning_rate", cfg.train.learning_rate, where);
        cfg.train.lr_decay_factor = get_number(t, "lr_decay_factor", cfg.train.lr_decay_factor, where);
        cfg.train.weight_decay = get_number(t, "weight_decay", cfg.train.weight_decay, where);
        try {
            if (t.contains("lr_decay_epochs")) cfg.train.lr_decay_epochs = t.at("lr_decay_epochs").get<std::vector<int>>();
            if (t.contains("hidden")) cfg.train.hidden = t.at("hidden").get<std::vector<std::size_t>>();
        } catch (const json::exception&) {
            throw ConfigError("train: lr_decay_epochs and hidden must be integer arrays");
        }
    }

    if (j.contains("metrics")) {
        const json& m = j.at("metrics");
        check_keys(m, {"bin_count"}, "metrics");
        cfg.bin_count = get_count(m, "bin_count", kDefaultBinCount, "metrics");
    }
    if (cfg.bin_count < 1) throw ConfigError("metrics.bin_count must be at least 1");
    cfg.train.bin_count = cfg.bin_count;

    if (!j.contains("methods") || !j.at("methods").is_array() || j.at("methods").empty()) {
        throw ConfigError("config: 'methods' must be a non-empty array");
    }
    std::set<std::string> labels;
    for (const json& m : j.at("methods")) {
        json body = m;
        std::string label;
        if (m.is_object() && m.contains("label")) {
            if (!m.at("label").is_string()) throw ConfigError("method label must be a string");
            label = m.at("label").get<std::string>();
            body.erase("label");
        }
        MethodEntry entry{label, method_from_json(body, default_margin)};
        if (entry.label.empty()) entry.label = method_name(entry.spec);
        if (!valid_label(entry.label)) throw ConfigError("method label '" + entry.label + "' has invalid characters");
        if (!labels.insert(entry.label).second) throw ConfigError("duplicate method label '" + entry.label + "'");
        cfg.methods.push_back(std::move(entry));
    }

    if (!j.contains("seeds") || !j.at("seeds").is_array() || j.at("seeds").empty()) {
        throw ConfigError("config: 'seeds' must be a non-empty array");
    }
    for (const json& s : j.at("seeds")) {
        if (!s.is_number_integer() || s.get<std::int64_t>() < 0) {
            throw ConfigError("seeds: expected non-negative integers");
        }
        cfg.seeds.push_back(s.get<std::uint64_t>());
    }

    if (!j.contains("output_dir") || !j.at("output_dir").is_string()) {
        throw ConfigError("config: 'output_dir' string is required");
    }
    cfg.output_dir = j.at("output_dir").get<std::string>();

    as_config_error([&] {
        validate(cfg.train);
        return 0;
    });
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Running

bool ExperimentSummary::any_failed() const {
    return std::any_of(runs.begin(), runs.end(), [](const RunRecord& r) { return !r.ok; });
}

Dataset materialize_dataset(const ExperimentConfig& config) {
    Dataset raw = std::visit(Overloaded{
                                 [](const GaussianMixtureSpec& s) { return gen_gaussian_mixture(s); },
                                 [](const std::filesystem::path& p) { return load_csv(p); },
                             },
                             config.dataset);
    return split(raw, config.split, config.split_seed);
}

std::size_t worker_slots() {
    std::size_t slots = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CALIB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) slots = static_cast<std::size_t>(v);
    }
    return slots;
}

namespace {

void write_run_files(const std::filesystem::path& dir, const std::string& stem, const RunResult& r,
                     const Dataset& d) {
    {
        std::ostringstream out;
        write_reliability_csv(out, r.test.bins);
        write_file(dir / ("reliability_" + stem + ".csv"), out.str());
    }
    {
        std::ostringstream out;
        out << "epoch,train_loss,val_ece\n";
        for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
            out << e + 1 << ',' << fmt17(r.train_loss[e]) << ',' << fmt17(r.val_ece[e]) << '\n';
        }
        write_file(dir / ("trace_" + stem + ".csv"), out.str());
    }
    {
        std::ostringstream out;
        out << "sample,activity\n";
        for (std::size_t k = 0; k < r.final_activity.size(); ++k) {
            out << d.train[k] << ',' << fmt17(r.final_activity[k]) << '\n';
        }
        write_file(dir / ("activity_" + stem + ".csv"), out.str());
    }
    {
        LogitsTable t;
        t.val_logits = r.val_logits;
        t.test_logits = r.test_logits;
        for (std::size_t i : d.val) t.val_labels.push_back(d.labels[i]);
        for (std::size_t i : d.test) t.test_labels.push_back(d.labels[i]);
        std::ostringstream out;
        write_logits_csv(out, t);
        write_file(dir / ("logits_" + stem + ".csv"), out.str());
    }
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& config, std::size_t threads) {
    const Dataset dataset = materialize_dataset(config);
    std::error_code ec;
    std::filesystem::create_directories(config.output_dir, ec);
    if (ec || !std::filesystem::is_directory(config.output_dir)) {
        throw IoError("cannot create output directory: " + config.output_dir.string());
    }

    ExperimentSummary summary;
    for (const auto& m : config.methods) {
        for (std::uint64_t seed : config.seeds) {
            RunRecord rec;
            rec.label = m.label;
            rec.spec = m.spec;
            rec.seed = seed;
            summary.runs.push_back(std::move(rec));
        }
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < summary.runs.size(); k = next++) {
            RunRecord& rec = summary.runs[k];
            TrainConfig tc = config.train;
            tc.method = rec.spec;
            tc.seed = rec.seed;
            try {
                const RunResult r = train(tc, dataset);
                rec.val = r.val;
                rec.test = r.test;
                rec.loss_partial = r.loss_partial;
                rec.prediction_flip_count = r.prediction_flip_count;
                rec.final_reg_inactive_fraction = r.reg_inactive_fraction.back();
                write_run_files(config.output_dir, rec.label + "_" + std::to_string(rec.seed), r, dataset);
                rec.ok = true;
            } catch (const TrainingDiverged& e) {
                rec.error = e.what();
                rec.diverged_epoch = e.epoch();
            } catch (const std::exception& e) {
                rec.error = e.what();
            }
        }
    };
    const std::size_t slots = std::min(threads == 0 ? worker_slots() : threads, summary.runs.size());
    if (slots <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < slots; ++t) pool.emplace_back(worker);
    }

    for (const auto& m : config.methods) {
        MethodAggregate agg;
        agg.label = m.label;
        std::vector<double> ve, va, vc, te, ta, tc;
        for (const auto& r : summary.runs) {
            if (r.label != m.label || !r.ok) continue;
            ++agg.runs;
            ve.push_back(r.val.ece);
            va.push_back(r.val.aece);
            vc.push_back(r.val.accuracy);
            te.push_back(r.test.ece);
            ta.push_back(r.test.aece);
            tc.push_back(r.test.accuracy);
        }
        agg.val_ece = stats_of(ve);
        agg.val_aece = stats_of(va);
        agg.val_accuracy = stats_of(vc);
        agg.test_ece = stats_of(te);
        agg.test_aece = stats_of(ta);
        agg.test_accuracy = stats_of(tc);
        summary.aggregates.push_back(std::move(agg));
    }

    const json doc = summary_to_json(summary, config.bin_count, utc_timestamp());
    if (const auto bad = schema_violation(doc, summary_schema())) {
        throw std::logic_error("summary.json violates its schema: " + *bad);
    }
    write_file(config.output_dir / "summary.json", doc.dump(2) + "\n");
    return summary;
}

json summary_to_json(const ExperimentSummary& summary, std::size_t bin_count, const std::string& generated_at) {
    json runs = json::array();
    std::map<std::string, std::size_t> seeds_per_label;
    for (const auto& r : summary.runs) {
        ++seeds_per_label[r.label];
        json j = {{"label", r.label}, {"method", method_to_json(r.spec)}, {"seed", r.seed},
                  {"status", r.ok ? "ok" : "error"}};
        if (r.ok) {
            j["val"] = report_to_json(r.val);
            j["test"] = report_to_json(r.test);
            j["loss_partial"] = r.loss_partial;
            j["prediction_flip_count"] = r.prediction_flip_count;
            j["final_reg_inactive_fraction"] = r.final_reg_inactive_fraction;
        } else {
            j["error"] = r.error;
            if (r.diverged_epoch) j["diverged_epoch"] = *r.diverged_epoch;
        }
        runs.push_back(std::move(j));
    }
    json aggregates = json::array();
    for (const auto& a : summary.aggregates) {
        json j = {{"label", a.label}, {"seeds", seeds_per_label[a.label]}, {"runs_ok", a.runs}};
        if (a.runs > 0) {
            j["val"] = {{"ece", stats_to_json(a.val_ece)},
                        {"aece", stats_to_json(a.val_aece)},
                        {"accuracy", stats_to_json(a.val_accuracy)}};
            j["test"] = {{"ece", stats_to_json(a.test_ece)},
                         {"aece", stats_to_json(a.test_aece)},
                         {"accuracy", stats_to_json(a.test_accuracy)}};
        }
        aggregates.push_back(std::move(j));
    }
    return {{"schema_version", 1}, {"generated_at", generated_at}, {"bin_count", bin_count},
            {"runs", std::move(runs)}, {"aggregates", std::move(aggregates)}};
}

const json& summary_schema() {
    static const json schema = json::parse(kSummarySchemaText);
    return schema;
}

namespace {

bool type_matches(const json& doc, const std::string& type) {
    if (type == "object") return doc.is_object();
    if (type == "array") return doc.is_array();
    if (type == "string") return doc.is_string();
    if (type == "integer") return doc.is_number_integer();
    if (type == "number") return doc.is_number();
    if (type == "boolean") return doc.is_boolean();
    if (type == "null") return doc.is_null();
    return false;
}

std::optional<std::string> check_node(const json& doc, const json& schema, const json& root,
                                      const std::string& path) {
    if (schema.contains("$ref")) {
        const std::string ref = schema.at("$ref").get<std::string>();
        const std::string prefix = "#/$defs/";
        if (ref.rfind(prefix, 0) != 0) return path + ": unsupported $ref " + ref;
        return check_node(doc, root.at("$defs").at(ref.substr(prefix.size())), root, path);
    }
    if (schema.contains("type")) {
        const json& t = schema.at("type");
        bool ok = false;
        if (t.is_string()) {
            ok = type_matches(doc, t.get<std::string>());
        } else {
            for (const auto& alt : t) ok = ok || type_matches(doc, alt.get<std::string>());
        }
        if (!ok) return path + ": wrong type";
    }
    if (schema.contains("enum")) {
        const json& e = schema.at("enum");
        if (std::find(e.begin(), e.end(), doc) == e.end()) return path + ": value not in enum";
    }
    if (doc.is_number()) {
        if (schema.contains("minimum") && doc.get<double>() < schema.at("minimum").get<double>()) {
            return path + ": below minimum";
        }
        if (schema.contains("maximum") && doc.get<double>() > schema.at("maximum").get<double>()) {
            return path + ": above maximum";
        }
    }
    if (doc.is_object()) {
        if (schema.contains("required")) {
            for (const auto& key : schema.at("required")) {
                if (!doc.contains(key.get<std::string>())) return path + ": missing " + key.get<std::string>();
            }
        }
        const json props = schema.value("properties", json::object());
        for (const auto& [key, value] : doc.items()) {
            if (props.contains(key)) {
                if (auto bad = check_node(value, props.at(key), root, path + "." + key)) return bad;
            } else if (schema.contains("additionalProperties") && schema.at("additionalProperties") == false) {
                return path + ": unexpected key " + key;
            }
        }
    }
    if (doc.is_array() && schema.contains("items")) {
        for (std::size_t i = 0; i < doc.size(); ++i) {
            if (auto bad = check_node(doc[i], schema.at("items"), root, path + "[" + std::to_string(i) + "]")) {
                return bad;
            }
        }
    }
    return std::nullopt;
}

}  // namespace

std::optional<std::string> schema_violation(const json& doc, const json& schema) {
    return check_node(doc, schema, schema, "$");
}

// ---------------------------------------------------------------------------
// Anatomy

Anatomy anatomy(const MethodSpec& spec, const LogitVector& z, ClassIndex y,
                const std::optional<PairContext>& ctx, const SweepConfig& sweep) {
    Anatomy a{z, softmax(z), reg_decompose(spec, z, y, ctx), {}};
    if (sweep.steps == 0) return a;
    const ClassIndex target = sweep.target.value_or(a.decomposition.yhat);
    if (target >= z.size()) throw InvalidInput("anatomy: sweep target out of range");

    for (std::size_t i = 0; i < sweep.steps; ++i) {
        const double x = sweep.steps == 1 ? sweep.from
                                          : sweep.from + (sweep.to - sweep.from) * static_cast<double>(i) /
                                                             static_cast<double>(sweep.steps - 1);
        LogitVector zs = z;
        if (sweep.axis == SweepAxis::logit) {
            zs = z.with(target, x);
        } else {
            if (!(x > 0.0 && x < 1.0)) throw InvalidInput("anatomy: probability sweep must stay inside (0, 1)");
            double rest = 0.0;
            for (std::size_t k = 0; k < z.size(); ++k) {
                if (k != target) rest += a.probabilities[k];
            }
            std::vector<double> v(z.size());
            for (std::size_t k = 0; k < z.size(); ++k) {
                v[k] = k == target ? std::log(x) : std::log((1.0 - x) * a.probabilities[k] / rest);
            }
            zs = LogitVector(std::move(v));
        }
        ClassIndex yhat = argmax_tiebreak_lowest(zs.values());
        if (sweep.branch == SweepBranch::yhat) {
            yhat = target;
        } else if (sweep.branch == SweepBranch::other) {
            yhat = target == 0 ? 1 : 0;
            for (std::size_t k = 0; k < zs.size(); ++k) {
                if (k != target && zs[k] > zs[yhat]) yhat = k;
            }
        }
        const GradientDecomposition d = decompose_with_prediction(spec, zs, y, yhat, ctx);
        const ProbVector ps = softmax(zs);
        a.sweep.push_back({x, zs[target], ps[target], yhat, d.f_value[target], d.indicator[target],
                           d.reg_grad[target], d.total_grad[target]});
    }
    return a;
}

void write_anatomy_table(std::ostream& out, const Anatomy& a) {
    out << "class,z,p,f,indicator,reg_grad,total_grad\n";
    const auto& d = a.decomposition;
    for (std::size_t j = 0; j < a.logits.size(); ++j) {
        out << j << (j == d.yhat ? "*" : "") << ',' << fmt17(a.logits[j]) << ',' << fmt17(a.probabilities[j])
            << ',' << fmt17(d.f_value[j]) << ',' << static_cast<int>(d.indicator[j]) << ','
            << fmt17(d.reg_grad[j]) << ',' << fmt17(d.total_grad[j]) << '\n';
    }
}

void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> points) {
    out << "x,z,p,yhat,f,indicator,reg_grad,total_grad\n";
    for (const auto& s : points) {
        out << fmt17(s.x) << ',' << fmt17(s.z) << ',' << fmt17(s.p) << ',' << s.yhat << ',' << fmt17(s.f) << ','
            << static_cast<int>(s.indicator) << ',' << fmt17(s.reg_grad) << ',' << fmt17(s.total_grad) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Histograms

std::vector<HistogramBin> reg_histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
    if (bins < 1) throw InvalidInput("reg_histogram: at least one bin required");
    if (!(hi > lo)) throw InvalidInput("reg_histogram: empty range");
    auto edge = [&](std::size_t i) { return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins); };
    std::vector<HistogramBin> out(bins);
    for (std::size_t b = 0; b < bins; ++b) out[b] = {edge(b), edge(b + 1), 0};
    for (double v : values) {
        if (std::isnan(v)) throw InvalidInput("reg_histogram: NaN value");
        const double c = std::clamp(v, lo, hi);
        auto b = static_cast<std::size_t>(std::floor((c - lo) / (hi - lo) * static_cast<double>(bins)));
        b = std::min(b, bins - 1);
        while (b > 0 && c < edge(b)) --b;
        while (b + 1 < bins && c >= edge(b + 1)) ++b;
        ++out[b].count;
    }
    return out;
}

double first_bin_share(std::span<const HistogramBin> bins) {
    std::size_t total = 0;
    for (const auto& b : bins) total += b.count;
    if (total == 0) return 0.0;
    return static_cast<double>(bins.front().count) / static_cast<double>(total);
}

void write_histogram_csv(std::ostream& out, std::span<const HistogramBin> bins) {
    out << "bin_lower,bin_upper,count\n";
    for (const auto& b : bins) out << fmt17(b.lower) << ',' << fmt17(b.upper) << ',' << b.count << '\n';
}

std::vector<double> read_activity_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::string line;
    if (!getline_lf(in, line) || line != "sample,activity") {
        throw SchemaError(path.string() + ": expected header 'sample,activity'");
    }
    std::vector<double> values;
    std::size_t line_no = 1;
    while (getline_lf(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 2) throw SchemaError(path.string() + ": line " + std::to_string(line_no) + ": expected 2 fields");
        parse_index(fields[0], line_no);
        values.push_back(parse_double(fields[1], line_no));
    }
    return values;
}

std::vector<std::pair<std::string, std::vector<HistogramBin>>> reg_histogram_dir(
    const std::filesystem::path& run_dir) {
    if (!std::filesystem::is_directory(run_dir)) throw IoError("not a run directory: " + run_dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(run_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("activity_", 0) == 0 && entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    if (files.empty()) throw IoError("no activity_*.csv artifacts in " + run_dir.string());
    std::sort(files.begin(), files.end());
    std::vector<std::pair<std::string, std::vector<HistogramBin>>> out;
    for (const auto& f : files) {
        const std::string stem = f.stem().string().substr(std::string("activity_").size());
        auto hist = reg_histogram(read_activity_csv(f));
        std::ostringstream csv;
        write_histogram_csv(csv, hist);
        write_file(run_dir / ("reg_hist_" + stem + ".csv"), csv.str());
        out.emplace_back(stem, std::move(hist));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Temperature scaling

void write_logits_csv(std::ostream& out, const LogitsTable& table) {
    const std::size_t c = !table.val_logits.empty()    ? table.val_logits.front().size()
                          : !table.test_logits.empty() ? table.test_logits.front().size()
                                                       : 0;
    out << "split,";
    for (std::size_t k = 0; k < c; ++k) out << 'z' << k << ',';
    out << "label\n";
    auto rows = [&](const char* split, const std::vector<LogitVector>& z, const std::vector<ClassIndex>& y) {
        for (std::size_t i = 0; i < z.size(); ++i) {
            out << split << ',';
            for (double v : z[i].values()) out << fmt17(v) << ',';
            out << y[i] << '\n';
        }
    };
    rows("val", table.val_logits, table.val_labels);
    rows("test", table.test_logits, table.test_labels);
}

LogitsTable read_logits_csv(std::istream& in) {
    std::string line;
    if (!getline_lf(in, line)) throw SchemaError("logits file: missing header");
    const auto header = split_csv(line);
    if (header.size() < 4 || header.front() != "split" || header.back() != "label") {
        throw SchemaError("logits file: header must be split,z0,...,z{C-1},label");
    }
    for (std::size_t k = 1; k + 1 < header.size(); ++k) {
        if (header[k] != "z" + std::to_string(k - 1)) throw SchemaError("logits file: unexpected column " + header[k]);
    }
    const std::size_t c = header.size() - 2;
    LogitsTable t;
    std::size_t line_no = 1;
    while (getline_lf(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != header.size()) {
            throw SchemaError("logits file: line " + std::to_string(line_no) + ": wrong field count");
        }
        std::vector<double> z(c);
        for (std::size_t k = 0; k < c; ++k) z[k] = parse_double(f[k + 1], line_no);
        const std::size_t y = parse_index(f.back(), line_no);
        if (y >= c) throw ParseError(line_no, "label out of range");
        LogitVector lv = [&] {
            try {
                return LogitVector(std::move(z));
            } catch (const InvalidInput& e) {
                throw ParseError(line_no, e.what());
            }
        }();
        if (f[0] == "val") {
            t.val_logits.push_back(std::move(lv));
            t.val_labels.push_back(y);
        } else if (f[0] == "test") {
            t.test_logits.push_back(std::move(lv));
            t.test_labels.push_back(y);
        } else {
            throw ParseError(line_no, "split must be 'val' or 'test'");
        }
    }
    return t;
}

LogitsTable read_logits_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    return read_logits_csv(in);
}

TemperatureReport posthoc_ts(const LogitsTable& table, std::size_t bin_count, const TemperatureGrid& grid) {
    if (table.val_logits.empty()) throw InvalidInput("temperature scaling needs a val split");
    TemperatureReport r;
    r.temperature = fit_temperature(table.val_logits, table.val_labels, grid);
    r.val_nll_before = nll_at_temperature(table.val_logits, table.val_labels, 1.0);
    r.val_nll_after = nll_at_temperature(table.val_logits, table.val_labels, r.temperature);
    if (!table.test_logits.empty()) {
        const std::size_t bins = std::min(bin_count, table.test_logits.size());
        r.test_before = calibration_report(PredictionSet::from_logits(table.test_logits, table.test_labels), bins);
        r.test_after = calibration_report(
            PredictionSet::from_logits(table.test_logits, table.test_labels, r.temperature), bins);
    }
    return r;
}

json temperature_report_to_json(const TemperatureReport& r) {
    json j = {{"temperature", r.temperature}, {"val_nll_before", r.val_nll_before}, {"val_nll_after", r.val_nll_after}};
    if (r.test_before) j["test_before"] = report_to_json(*r.test_before);
    if (r.test_after) j["test_after"] = report_to_json(*r.test_after);
    return j;
}

}  // namespace calib
