#pragma once

// Read-only JSON API over a trained model, its embedding index and an optional
// atlas. handle() is transport-free; serve() puts it behind an HTTP server.

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crystalign/atlas.hpp"
#include "crystalign/encoders.hpp"
#include "crystalign/retrieval.hpp"

namespace crystalign {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Exact origins, or "scheme://host:*" for any port on that host.
  std::vector<std::string> cors_origins = {"http://localhost:*", "http://127.0.0.1:*"};
  std::size_t default_k = 10;
};

bool origin_allowed(const std::vector<std::string>& allowlist, const std::string& origin);

struct ServiceRequest {
  std::string method;
  std::string path;
  std::string body;
  std::string origin;
};

struct ServiceResponse {
  int status = 200;
  std::string body;  // JSON text
  std::map<std::string, std::string> headers;

  nlohmann::json json() const { return nlohmann::json::parse(body); }
};

/// Payload scores: round(x * 1e6) / 1e6.
double round_score(double x);

/// What /search returns, built straight from the library calls.
nlohmann::json search_payload(const DualEncoder<float>& model, const EmbeddingIndex& index, std::string_view query,
                              std::size_t k);

class Service {
 public:
  explicit Service(ServiceConfig cfg = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// One-shot startup. Atlas ids must equal the index ids (as a set) or
  /// Errc::InvalidConfig is thrown. Requests before this get 503.
  void load(std::shared_ptr<const DualEncoder<float>> model, std::string model_checksum, EmbeddingIndex index,
            std::optional<Atlas> atlas = std::nullopt);
  bool ready() const { return ready_.load(std::memory_order_acquire); }

  ServiceResponse handle(const ServiceRequest& req) const;

  /// Binds host:port (port 0 picks a free one) and serves on a background thread;
  /// returns the bound port. Throws Errc::Io if the bind fails.
  int start();
  /// Blocks until stop().
  void wait();
  void stop();

  const ServiceConfig& config() const { return cfg_; }
  /// Receives one JSON line per request; defaults to stdout.
  void set_access_sink(std::function<void(const std::string&)> sink) { access_sink_ = std::move(sink); }

 private:
  ServiceResponse route(const ServiceRequest& req) const;
  ServiceResponse health() const;
  ServiceResponse search(const std::string& body) const;
  ServiceResponse map() const;
  ServiceResponse heatmap(const std::string& body) const;
  ServiceResponse structure(const std::string& id) const;
  ServiceResponse clusters() const;

  struct Server;

  ServiceConfig cfg_;
  std::atomic<bool> ready_{false};
  std::shared_ptr<const DualEncoder<float>> model_;
  std::string checksum_;
  EmbeddingIndex index_;
  std::optional<Atlas> atlas_;
  std::vector<std::size_t> atlas_rows_;  // index row of each atlas point
  std::function<void(const std::string&)> access_sink_;
  std::unique_ptr<Server> server_;
};

}  // namespace crystalign
