#include "crystalign/service.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>
#include <variant>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "crystalign/cif.hpp"
#include "crystalign/error.hpp"
#include "crystalign/tokenizer.hpp"

namespace crystalign {
namespace {

ServiceResponse reply(int status, const nlohmann::json& body) {
  ServiceResponse r;
  r.status = status;
  r.body = body.dump();
  r.headers["Content-Type"] = "application/json";
  return r;
}

ServiceResponse error_reply(int status, const std::string& message) {
  return reply(status, {{"error", message}});
}

struct QueryArgs {
  std::string query;
  std::optional<nlohmann::json> k;
};

// 400 for malformed bodies and empty queries, 422 when the query has no tokens
std::variant<QueryArgs, ServiceResponse> parse_query(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_reply(400, "body is not valid JSON");
  }
  if (!j.is_object() || !j.contains("query") || !j["query"].is_string()) {
    return error_reply(400, "query must be a string");
  }
  QueryArgs args;
  args.query = j["query"].get<std::string>();
  if (args.query.empty()) return error_reply(400, "query is empty");
  if (split_words(args.query).empty()) return error_reply(422, "query has no tokens");
  if (j.contains("k")) args.k = j["k"];
  return args;
}

}  // namespace

bool origin_allowed(const std::vector<std::string>& allowlist, const std::string& origin) {
  if (origin.empty()) return false;
  for (const auto& entry : allowlist) {
    if (entry == "*" || entry == origin) return true;
    if (entry.size() > 2 && entry.ends_with(":*")) {
      const std::string base = entry.substr(0, entry.size() - 2);
      if (origin == base) return true;
      if (origin.starts_with(base + ":")) {
        const std::string port = origin.substr(base.size() + 1);
        if (!port.empty() && port.find_first_not_of("0123456789") == std::string::npos) return true;
      }
    }
  }
  return false;
}

double round_score(double x) { return std::round(x * 1e6) / 1e6; }

nlohmann::json search_payload(const DualEncoder<float>& model, const EmbeddingIndex& index, std::string_view query,
                              std::size_t k) {
  const auto q = model.encode_text(query);
  nlohmann::json results = nlohmann::json::array();
  for (const auto& hit : crystalign::query(index, std::span<const float>(q), k)) {
    results.push_back({{"id", hit.id}, {"title", index.metadata(hit.row).title}, {"score", round_score(hit.score)}});
  }
  return {{"query", std::string(query)}, {"k", k}, {"results", std::move(results)}};
}

struct Service::Server {
  httplib::Server http;
  std::thread thread;
};

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  access_sink_ = [](const std::string& line) {
    std::fwrite(line.data(), 1, line.size(), stdout);
    std::fputc('\n', stdout);
    std::fflush(stdout);
  };
}

Service::~Service() { stop(); }

void Service::load(std::shared_ptr<const DualEncoder<float>> model, std::string model_checksum, EmbeddingIndex index,
                   std::optional<Atlas> atlas) {
  if (ready()) throw Error(Errc::InvalidConfig, "service state is already loaded");
  if (!model) throw Error(Errc::InvalidConfig, "service needs a model");
  if (index.empty()) throw Error(Errc::EmptyIndex, "service needs a nonempty index");
  if (model->config().crystal.embed_dim != index.dim()) {
    throw Error(Errc::ShapeMismatch, "index dimension does not match the model");
  }
  std::vector<std::size_t> rows;
  if (atlas) {
    if (atlas->ids.size() != index.size()) {
      throw Error(Errc::InvalidConfig, "atlas has " + std::to_string(atlas->ids.size()) + " points, index has " +
                                           std::to_string(index.size()));
    }
    std::set<std::size_t> seen;
    for (const auto& id : atlas->ids) {
      const auto row = index.find(id);
      if (!row || !seen.insert(*row).second) throw Error(Errc::InvalidConfig, "atlas id not in index: " + id);
      rows.push_back(*row);
    }
  }
  model_ = std::move(model);
  checksum_ = std::move(model_checksum);
  index_ = std::move(index);
  atlas_ = std::move(atlas);
  atlas_rows_ = std::move(rows);
  ready_.store(true, std::memory_order_release);
}

ServiceResponse Service::handle(const ServiceRequest& req) const {
  ServiceResponse r;
  try {
    r = route(req);
  } catch (const Error& e) {
    r = error_reply(500, e.what());
  } catch (const std::exception& e) {
    r = error_reply(500, e.what());
  }
  if (origin_allowed(cfg_.cors_origins, req.origin)) {
    r.headers["Access-Control-Allow-Origin"] = req.origin;
    r.headers["Vary"] = "Origin";
    r.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
    r.headers["Access-Control-Allow-Headers"] = "Content-Type";
  }
  return r;
}

ServiceResponse Service::route(const ServiceRequest& req) const {
  const std::string& path = req.path;
  if (req.method == "OPTIONS") {
    ServiceResponse r;
    r.status = 204;
    return r;
  }
  const bool get = req.method == "GET";
  const bool post = req.method == "POST";
  const auto expect = [&](bool ok) -> std::optional<ServiceResponse> {
    if (!ok) return error_reply(405, "method not allowed");
    if (!ready()) return error_reply(503, "index is still loading");
    return std::nullopt;
  };

  if (path == "/health") {
    if (!get) return error_reply(405, "method not allowed");
    return health();
  }
  if (path == "/search") {
    if (auto r = expect(post)) return *r;
    return search(req.body);
  }
  if (path == "/map") {
    if (auto r = expect(get)) return *r;
    return map();
  }
  if (path == "/heatmap") {
    if (auto r = expect(post)) return *r;
    return heatmap(req.body);
  }
  if (path == "/clusters") {
    if (auto r = expect(get)) return *r;
    return clusters();
  }
  constexpr std::string_view kStructure = "/structure/";
  if (path.starts_with(kStructure) && path.size() > kStructure.size()) {
    if (auto r = expect(get)) return *r;
    return structure(path.substr(kStructure.size()));
  }
  return error_reply(404, "no such endpoint");
}

ServiceResponse Service::health() const {
  if (!ready()) return reply(503, {{"status", "loading"}, {"model_checksum", nullptr}, {"n_structures", 0}});
  return reply(200, {{"status", "ok"}, {"model_checksum", checksum_}, {"n_structures", index_.size()}});
}

ServiceResponse Service::search(const std::string& body) const {
  auto parsed = parse_query(body);
  if (auto* r = std::get_if<ServiceResponse>(&parsed)) return *r;
  const auto& args = std::get<QueryArgs>(parsed);
  std::size_t k = std::min(cfg_.default_k, index_.size());
  if (args.k) {
    if (!args.k->is_number_integer()) return error_reply(400, "k must be an integer");
    const auto v = args.k->get<long long>();
    if (v < 1 || static_cast<unsigned long long>(v) > index_.size()) {
      return error_reply(400, "k must be in [1, " + std::to_string(index_.size()) + "]");
    }
    k = static_cast<std::size_t>(v);
  }
  return reply(200, search_payload(*model_, index_, args.query, k));
}

ServiceResponse Service::map() const {
  if (!atlas_) return error_reply(409, "no atlas loaded");
  return reply(200, to_json(*atlas_));
}

ServiceResponse Service::heatmap(const std::string& body) const {
  if (!atlas_) return error_reply(409, "no atlas loaded");
  auto parsed = parse_query(body);
  if (auto* r = std::get_if<ServiceResponse>(&parsed)) return *r;
  const auto q = model_->encode_text(std::get<QueryArgs>(parsed).query);
  const auto sims = heatmap_overlay(index_, q);
  nlohmann::json values = nlohmann::json::array();
  for (auto row : atlas_rows_) values.push_back(round_score(sims[row]));
  return reply(200, {{"ids", atlas_->ids}, {"values", std::move(values)}});
}

ServiceResponse Service::structure(const std::string& id) const {
  const auto row = index_.find(id);
  if (!row) return error_reply(404, "unknown structure id: " + id);
  const auto& meta = index_.metadata(*row);
  if (meta.cif_path.empty()) return error_reply(404, "no CIF recorded for " + id);
  const auto s = load_structure(meta.cif_path);
  auto j = to_json(s);
  j["id"] = id;
  j["title"] = meta.title;
  j["formula"] = meta.formula;
  return reply(200, j);
}

ServiceResponse Service::clusters() const {
  if (!atlas_) return error_reply(409, "no atlas loaded");
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : atlas_->cluster_info) clusters.push_back({{"id", c.id}, {"label", c.label}, {"size", c.size}});
  return reply(200, {{"clusters", std::move(clusters)}, {"jsd", atlas_->jsd}});
}

int Service::start() {
  if (server_) throw Error(Errc::InvalidConfig, "server already started");
  server_ = std::make_unique<Server>();
  auto& http = server_->http;
  // catch-all routes; a pre-routing hook would run before the body is read
  const auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    ServiceRequest sreq{req.method, req.path, req.body, req.get_header_value("Origin")};
    const auto sres = handle(sreq);
    res.status = sres.status;
    for (const auto& [k, v] : sres.headers) {
      if (k != "Content-Type") res.set_header(k, v);
    }
    if (!sres.body.empty()) res.set_content(sres.body, "application/json");
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    if (access_sink_) {
      access_sink_(nlohmann::json{{"ts_ms", now},
                                  {"remote", req.remote_addr},
                                  {"method", req.method},
                                  {"path", req.path},
                                  {"status", sres.status},
                                  {"bytes", sres.body.size()},
                                  {"ms", std::round(ms * 1000.0) / 1000.0}}
                       .dump());
    }
  };
  http.Get(".*", dispatch);
  http.Post(".*", dispatch);
  http.Put(".*", dispatch);
  http.Patch(".*", dispatch);
  http.Delete(".*", dispatch);
  http.Options(".*", dispatch);
  int port = cfg_.port;
  if (port == 0) {
    port = http.bind_to_any_port(cfg_.host);
  } else if (!http.bind_to_port(cfg_.host, port)) {
    port = -1;
  }
  if (port <= 0) {
    server_.reset();
    throw Error(Errc::Io, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  }
  server_->thread = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  spdlog::info("serving on http://{}:{}", cfg_.host, port);
  return port;
}

void Service::wait() {
  if (server_ && server_->thread.joinable()) server_->thread.join();
}

void Service::stop() {
  if (!server_) return;
  server_->http.stop();
  if (server_->thread.joinable()) server_->thread.join();
  server_.reset();
}

}  // namespace crystalign
