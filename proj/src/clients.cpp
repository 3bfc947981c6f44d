#include "crystalign/clients.hpp"

#include <cctype>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "crystalign/error.hpp"

namespace crystalign {
namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  SplitUrl out;
  out.origin = path_start == std::string::npos ? url : url.substr(0, path_start);
  out.prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

std::string url_encode_path(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~' || c == '/' || c == '(' || c == ')' ||
        c == ';' || c == ':') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::Io, path.string() + ": " + e.what());
  }
}

}  // namespace

RateLimiter::RateLimiter(double requests_per_second) {
  if (requests_per_second > 0.0) {
    interval_ = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double>(1.0 / requests_per_second));
  }
}

void RateLimiter::acquire() {
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + interval_;
  }
  std::this_thread::sleep_until(slot);
}

// ---------------------------------------------------------------------------

StubDoiClient::StubDoiClient(std::map<std::string, std::optional<std::string>> abstracts)
    : abstracts_(std::move(abstracts)) {}

std::unique_ptr<StubDoiClient> StubDoiClient::from_file(const std::filesystem::path& path) {
  auto client = std::make_unique<StubDoiClient>();
  const nlohmann::json fixture = read_json_file(path);
  for (const auto& [doi, value] : fixture.items()) {
    if (value.is_string()) {
      client->abstracts_[doi] = value.get<std::string>();
    } else if (value.is_object() && value.contains("status")) {
      client->failing_[doi] = value["status"].get<int>();
    } else {
      client->abstracts_[doi] = std::nullopt;
    }
  }
  return client;
}

void StubDoiClient::script(const std::string& doi, std::vector<int> statuses) {
  std::lock_guard lock(mu_);
  scripted_[doi] = std::move(statuses);
}

DoiLookup StubDoiClient::lookup(const std::string& doi) {
  ++calls_;
  std::lock_guard lock(mu_);
  if (auto it = scripted_.find(doi); it != scripted_.end() && !it->second.empty()) {
    const int status = it->second.front();
    it->second.erase(it->second.begin());
    return {status, std::nullopt};
  }
  if (const auto it = failing_.find(doi); it != failing_.end()) return {it->second, std::nullopt};
  const auto it = abstracts_.find(doi);
  if (it == abstracts_.end() || !it->second) return {404, std::nullopt};
  return {200, it->second};
}

CrossrefClient::CrossrefClient(std::string base_url, bool offline, std::string mailto)
    : base_url_(std::move(base_url)), mailto_(std::move(mailto)) {
  if (offline) throw Error(Errc::Offline, "network DOI client requested in offline mode");
}

DoiLookup CrossrefClient::lookup(const std::string& doi) {
  const SplitUrl url = split_url(base_url_);
  httplib::Client cli(url.origin);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(30);
  httplib::Headers headers;
  std::string agent = "crystalign/1.0";
  if (!mailto_.empty()) agent += " (mailto:" + mailto_ + ")";
  headers.emplace("User-Agent", agent);
  const auto res = cli.Get(url.prefix + "/works/" + url_encode_path(doi), headers);
  if (!res) return {0, std::nullopt};
  DoiLookup out{res->status, std::nullopt};
  if (res->status != 200) return out;
  try {
    const auto body = nlohmann::json::parse(res->body);
    const auto& message = body.at("message");
    if (message.contains("abstract") && message["abstract"].is_string()) {
      const std::string text = strip_markup(message["abstract"].get<std::string>());
      if (!text.empty()) out.abstract = text;
    }
  } catch (const nlohmann::json::exception&) {
    out.status = 0;  // unusable body is retried like a transport failure
  }
  return out;
}

// ---------------------------------------------------------------------------

StubLlmClient::StubLlmClient(std::map<std::string, std::vector<std::string>> replies) : replies_(std::move(replies)) {}

std::string StubLlmClient::render_keywords(const std::string& id, const std::vector<std::string>& keywords) {
  const nlohmann::json reply = nlohmann::json::array({{{"ID", id}, {"Keywords", keywords}}});
  return reply.dump(4) + "\n```";
}

std::unique_ptr<StubLlmClient> StubLlmClient::from_file(const std::filesystem::path& path) {
  auto client = std::make_unique<StubLlmClient>();
  const nlohmann::json fixture = read_json_file(path);
  for (const auto& [id, value] : fixture.items()) {
    if (value.is_string()) {
      client->replies_[id] = {value.get<std::string>()};
    } else if (value.is_object() && value.contains("raw")) {
      client->replies_[id] = value["raw"].get<std::vector<std::string>>();
    } else if (value.is_array()) {
      client->replies_[id] = {render_keywords(id, value.get<std::vector<std::string>>())};
    }
  }
  return client;
}

void StubLlmClient::set_replies(const std::string& id, std::vector<std::string> replies) {
  std::lock_guard lock(mu_);
  replies_[id] = std::move(replies);
  cursor_[id] = 0;
}

std::optional<std::string> StubLlmClient::prompt_material_id(const std::string& prompt) {
  const auto input = prompt.rfind("**Input :**");
  if (input == std::string::npos) return std::nullopt;
  const auto tag = prompt.find("ID: ", input);
  if (tag == std::string::npos) return std::nullopt;
  const auto end = prompt.find('\n', tag);
  return prompt.substr(tag + 4, end == std::string::npos ? std::string::npos : end - tag - 4);
}

LlmReply StubLlmClient::complete(const std::string& prompt) {
  ++calls_;
  const auto id = prompt_material_id(prompt);
  std::lock_guard lock(mu_);
  if (!id) return {400, ""};
  const auto it = replies_.find(*id);
  if (it == replies_.end() || it->second.empty()) return {200, "[]"};
  std::size_t& cur = cursor_[*id];
  const std::string& reply = it->second[std::min(cur, it->second.size() - 1)];
  ++cur;
  return {200, reply};
}

ChatCompletionsClient::ChatCompletionsClient(std::string base_url, std::string api_key, std::string model,
                                             bool offline)
    : base_url_(std::move(base_url)), api_key_(std::move(api_key)), model_(std::move(model)) {
  if (offline) throw Error(Errc::Offline, "network LLM client requested in offline mode");
}

LlmReply ChatCompletionsClient::complete(const std::string& prompt) {
  const SplitUrl url = split_url(base_url_);
  httplib::Client cli(url.origin);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(300);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const nlohmann::json body = {{"model", model_}, {"messages", {{{"role", "user"}, {"content", prompt}}}}};
  const auto res = cli.Post(url.prefix + "/v1/chat/completions", headers, body.dump(), "application/json");
  if (!res) return {0, ""};
  if (res->status != 200) return {res->status, res->body};
  try {
    const auto j = nlohmann::json::parse(res->body);
    return {200, j.at("choices").at(0).at("message").at("content").get<std::string>()};
  } catch (const nlohmann::json::exception&) {
    return {200, res->body};
  }
}

std::string strip_markup(const std::string& text) {
  std::string out;
  bool in_tag = false;
  bool pending_space = false;
  for (char c : text) {
    if (c == '<') {
      in_tag = true;
      pending_space = true;
      continue;
    }
    if (in_tag) {
      if (c == '>') in_tag = false;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

}  // namespace crystalign
