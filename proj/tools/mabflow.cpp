// mabflow: operator and CI entry point.
//
//   mabflow serve    --config service.json [--port N] [--data-dir DIR]
//   mabflow simulate --spec env.json --epochs N [--seeds S] [--seed BASE] --out DIR
//   mabflow batch    --campaign ID [--url http://127.0.0.1:8080] [--token T]
//   mabflow eval     --recs recs.jsonl --truth truth.jsonl [--k 10] [--kind click] [--model NAME]
//   mabflow export   --trace trace.json [--csv out.csv] [--svg out.svg]
//
// Results go to stdout as JSON; diagnostics go to stderr.
// Exit codes: 0 success, 2 usage or input error, 3 upstream unavailable.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"

#include "mabflow/http.hpp"
#include "mabflow/metrics.hpp"
#include "mabflow/service.hpp"
#include "mabflow/simulator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kUnavailable = 3;

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mabflow::Error(mabflow::ErrorCode::not_found, "cannot open file", path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw mabflow::Error(mabflow::ErrorCode::invalid, "not valid JSON: " + path, e.what());
    }
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw mabflow::Error(mabflow::ErrorCode::storage, "cannot write file", path.string());
    out << content;
}

int fail(const std::string& msg, int code = kUsage) {
    std::cerr << "mabflow: " << msg << "\n";
    return code;
}

// ---------------------------------------------------------------------------

mabflow::service::HttpServer* g_server = nullptr;

int run_serve(const std::string& config_path, int port, const std::string& data_dir) {
    mabflow::service::ServiceConfig config;
    if (!config_path.empty()) config = mabflow::service::load_service_config(config_path);
    mabflow::service::apply_env_overrides(config);
    if (port >= 0) config.port = port;
    if (!data_dir.empty()) config.data_dir = data_dir;

    mabflow::service::CampaignService service(config);
    mabflow::service::HttpServer server(service);
    std::unique_ptr<mabflow::service::DailyScheduler> scheduler;
    if (!config.batch_schedule.empty()) {
        scheduler = std::make_unique<mabflow::service::DailyScheduler>(
            service, mabflow::service::parse_daily_time(config.batch_schedule));
    }
    const int bound = server.bind(config.host, config.port);
    g_server = &server;
    std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
    std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
    std::cerr << "mabflow: listening on " << config.host << ":" << bound << " (data " << config.data_dir << ")\n";
    std::cout << json{{"host", config.host}, {"port", bound}}.dump() << std::endl;
    server.listen();
    g_server = nullptr;
    return kOk;
}

int run_simulate(const std::string& spec_path, std::size_t epochs, std::size_t seeds, std::optional<std::uint64_t> base_seed,
                 const std::string& out_dir, unsigned jobs) {
    if (!fs::exists(spec_path)) return fail("spec file not found: " + spec_path);
    const json spec = read_json_file(spec_path);
    mabflow::sim::EnvironmentSpec env = mabflow::sim::environment_from_json(spec);
    const mabflow::sim::SimConfig config = mabflow::sim::sim_config_from_json(spec);
    mabflow::sim::validate(env);
    const std::uint64_t first = base_seed.value_or(env.seed);
    fs::create_directories(out_dir);

    std::vector<mabflow::sim::CampaignTrace> traces(seeds);
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < seeds; i = next++) {
            auto e = env;
            e.seed = first + i;
            traces[i] = mabflow::sim::simulate_campaign(e, config, epochs);
        }
    };
    std::vector<std::future<void>> pool;
    for (unsigned j = 0; j < std::min<std::size_t>(jobs, seeds); ++j) pool.push_back(std::async(std::launch::async, worker));
    for (auto& f : pool) f.get();

    json runs = json::array();
    std::map<mabflow::ArmId, double> mean_final;
    double mean_regret = 0.0;
    for (const auto& t : traces) {
        const std::string stem = "trace-" + std::to_string(t.seed);
        write_file(fs::path(out_dir) / (stem + ".csv"), mabflow::sim::trace_csv(t));
        write_file(fs::path(out_dir) / (stem + ".json"), mabflow::sim::trace_json(t).dump(2));
        write_file(fs::path(out_dir) / (stem + ".svg"), mabflow::sim::render_svg(t, "Allocation by epoch, seed " + std::to_string(t.seed)));
        const double r = mabflow::sim::regret(t);
        mean_regret += r / static_cast<double>(seeds);
        for (const auto& [arm, w] : t.final_allocation.weights) mean_final[arm] += w / static_cast<double>(seeds);
        runs.push_back({{"seed", t.seed}, {"final_allocation", t.final_allocation}, {"regret", r}});
    }
    json mean = json::object();
    for (const auto& [arm, w] : mean_final) mean[arm.value] = w;
    const json summary = {{"epochs", epochs}, {"seeds", seeds}, {"mean_final_allocation", mean},
                          {"mean_regret", mean_regret}, {"runs", runs}};
    write_file(fs::path(out_dir) / "summary.json", summary.dump(2));
    std::cout << summary.dump() << std::endl;
    return kOk;
}

int run_batch(const std::string& campaign, const std::string& url, const std::string& token) {
    httplib::Client client(url);
    client.set_connection_timeout(5, 0);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    auto res = client.Post("/campaigns/" + campaign + "/batch", headers, "", "application/json");
    if (!res) return fail("service unreachable at " + url + ": " + httplib::to_string(res.error()), kUnavailable);
    json body;
    try {
        body = json::parse(res->body);
    } catch (const json::parse_error&) {
        return fail("service returned a non-JSON response (status " + std::to_string(res->status) + ")", kUnavailable);
    }
    if (res->status >= 500) return fail("service error: " + body.dump(), kUnavailable);
    if (res->status >= 400) return fail("request rejected: " + body.dump(), kUsage);
    if (body.value("unchanged", false)) {
        body["message"] = "allocation unchanged";
        std::cerr << "allocation unchanged\n";
    }
    std::cout << body.dump() << std::endl;
    return kOk;
}

int run_eval(const std::string& recs, const std::string& truth, std::size_t k, const std::string& kind,
             const std::string& model) {
    const auto matrix = mabflow::metrics::load_truth(truth, mabflow::metrics::kind_from_string(kind));
    const auto lists = mabflow::metrics::load_ranked_lists(recs);
    mabflow::metrics::check_user_alignment(lists, matrix);
    const auto report = mabflow::metrics::evaluate(model.empty() ? fs::path(recs).stem().string() : model, lists, matrix, k);
    std::cout << mabflow::metrics::to_json(report).dump() << std::endl;
    return kOk;
}

int run_export(const std::string& trace_path, const std::string& csv, const std::string& svg) {
    const auto trace = mabflow::sim::trace_from_json(read_json_file(trace_path));
    json out = json::object();
    if (!csv.empty()) {
        write_file(csv, mabflow::sim::trace_csv(trace));
        out["csv"] = csv;
    }
    if (!svg.empty()) {
        write_file(svg, mabflow::sim::render_svg(trace));
        out["svg"] = svg;
    }
    if (csv.empty() && svg.empty()) std::cout << mabflow::sim::trace_csv(trace);
    else std::cout << out.dump() << std::endl;
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mabflow: Thompson-sampling traffic allocation for recommender experiments"};
    app.require_subcommand(1);
    app.footer(
        "Outputs:\n"
        "  simulate  trace-<seed>.csv (epoch,arm,weight,S,F,true_ctr,regret_cum), trace-<seed>.json,\n"
        "            trace-<seed>.svg (allocation timeseries), summary.json\n"
        "  eval      {model, kind, k, mrr, ndcg@k, map@k, n_users, conventions}\n"
        "  batch     the service's batch response\n"
        "Exit codes: 0 success, 2 usage or input error, 3 upstream unavailable.");

    std::string config_path, data_dir;
    int port = -1;
    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    serve->add_option("--config", config_path, "Service configuration (JSON)");
    serve->add_option("--port", port, "Listen port (overrides config and MABFLOW_PORT)");
    serve->add_option("--data-dir", data_dir, "Storage directory (overrides config and MABFLOW_DATA_DIR)");

    std::string spec_path, out_dir;
    std::size_t epochs = 14, seeds = 1;
    std::optional<std::uint64_t> base_seed;
    unsigned jobs = 0;
    auto* simulate = app.add_subcommand("simulate", "Simulate campaigns against a synthetic environment");
    simulate->add_option("--spec", spec_path, "Environment + campaign spec (JSON)")->required();
    simulate->add_option("--epochs", epochs, "Epochs per campaign")->check(CLI::PositiveNumber);
    simulate->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);
    simulate->add_option("--seed", base_seed, "First seed (default: the spec's seed)");
    simulate->add_option("--jobs", jobs, "Parallel workers (default: hardware threads)");
    simulate->add_option("--out", out_dir, "Output directory")->required();

    std::string campaign, url = "http://127.0.0.1:8080", token;
    auto* batch = app.add_subcommand("batch", "Trigger the mini-batch on a running service");
    batch->add_option("--campaign", campaign, "Campaign id")->required();
    batch->add_option("--url", url, "Service base URL");
    batch->add_option("--token", token, "API token");

    std::string recs, truth, kind = "click", model;
    std::size_t k = 10;
    auto* eval = app.add_subcommand("eval", "Offline ranking metrics (MRR, NDCG@k, MAP@k)");
    eval->add_option("--recs", recs, "Ranked lists (.jsonl or .csv)")->required();
    eval->add_option("--truth", truth, "Interaction matrix (.jsonl or .csv)")->required();
    eval->add_option("--k", k, "Cutoff")->check(CLI::PositiveNumber);
    eval->add_option("--kind", kind, "click or purchase")->check(CLI::IsMember({"click", "purchase"}));
    eval->add_option("--model", model, "Model name for the report");

    std::string trace_path, csv, svg;
    auto* exp = app.add_subcommand("export", "Convert a trace JSON to CSV and/or SVG");
    exp->add_option("--trace", trace_path, "Trace JSON from simulate")->required();
    exp->add_option("--csv", csv, "CSV output path");
    exp->add_option("--svg", svg, "SVG output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*serve) return run_serve(config_path, port, data_dir);
        if (*simulate) return run_simulate(spec_path, epochs, seeds, base_seed, out_dir, jobs);
        if (*batch) return run_batch(campaign, url, token);
        if (*eval) return run_eval(recs, truth, k, kind, model);
        if (*exp) return run_export(trace_path, csv, svg);
    } catch (const mabflow::Error& e) {
        std::string msg = std::string(to_string(e.code())) + ": " + e.what();
        if (!e.detail().empty()) msg += " (" + e.detail() + ")";
        return fail(msg, e.code() == mabflow::ErrorCode::storage || e.code() == mabflow::ErrorCode::internal ? 1 : kUsage);
    } catch (const std::exception& e) {
        return fail(e.what(), 1);
    }
    return kUsage;
}
