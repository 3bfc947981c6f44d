#pragma once

// Network clients behind small interfaces: DOI metadata (abstracts) and an LLM
// completion endpoint. Each has an HTTP implementation and a fixture-backed stub.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace crystalign {

/// status: HTTP status, or 0 for a transport failure.
struct DoiLookup {
  int status = 0;
  std::optional<std::string> abstract;
};

class DoiClient {
 public:
  virtual ~DoiClient() = default;
  virtual DoiLookup lookup(const std::string& doi) = 0;
};

struct LlmReply {
  int status = 0;
  std::string text;
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual LlmReply complete(const std::string& prompt) = 0;
};

/// Minimum spacing between request starts, shared across worker threads.
class RateLimiter {
 public:
  explicit RateLimiter(double requests_per_second);
  void acquire();

 private:
  std::mutex mu_;
  std::chrono::steady_clock::duration interval_{};
  std::chrono::steady_clock::time_point next_{};
};

/// doi -> abstract (nullopt answers 404). Scripted statuses are consumed first,
/// which lets tests force 5xx or transport failures.
class StubDoiClient final : public DoiClient {
 public:
  StubDoiClient() = default;
  explicit StubDoiClient(std::map<std::string, std::optional<std::string>> abstracts);

  /// Fixture JSON: {doi: "abstract" | null | {"status": 500}}.
  static std::unique_ptr<StubDoiClient> from_file(const std::filesystem::path& path);

  void script(const std::string& doi, std::vector<int> statuses);
  DoiLookup lookup(const std::string& doi) override;
  std::size_t calls() const { return calls_.load(); }

 private:
  std::mutex mu_;
  std::map<std::string, std::optional<std::string>> abstracts_;
  std::map<std::string, std::vector<int>> scripted_;
  std::map<std::string, int> failing_;  // fixture statuses never clear
  std::atomic<std::size_t> calls_{0};
};

/// Crossref-style REST client: GET {base}/works/{doi}, abstract from message.abstract.
class CrossrefClient final : public DoiClient {
 public:
  /// Throws Errc::Offline when offline is set.
  CrossrefClient(std::string base_url, bool offline, std::string mailto = {});
  DoiLookup lookup(const std::string& doi) override;

 private:
  std::string base_url_;
  std::string mailto_;
};

/// Material id (taken from the prompt's input block) -> raw reply text.
class StubLlmClient final : public LlmClient {
 public:
  StubLlmClient() = default;
  explicit StubLlmClient(std::map<std::string, std::vector<std::string>> replies);

  /// Fixture JSON: {id: ["keyword", ...] | "raw reply text" | ["raw1", "raw2"] via {"raw": [...]}}.
  /// Keyword lists are rendered in the reply schema the prompt asks for.
  static std::unique_ptr<StubLlmClient> from_file(const std::filesystem::path& path);

  /// Successive calls for the same id walk through the list; the last entry repeats.
  void set_replies(const std::string& id, std::vector<std::string> replies);
  LlmReply complete(const std::string& prompt) override;
  std::size_t calls() const { return calls_.load(); }

  static std::string render_keywords(const std::string& id, const std::vector<std::string>& keywords);
  /// The "ID: ..." value from the prompt's final input block.
  static std::optional<std::string> prompt_material_id(const std::string& prompt);

 private:
  std::mutex mu_;
  std::map<std::string, std::vector<std::string>> replies_;
  std::map<std::string, std::size_t> cursor_;
  std::atomic<std::size_t> calls_{0};
};

/// OpenAI-compatible chat completions endpoint: POST {base}/v1/chat/completions.
class ChatCompletionsClient final : public LlmClient {
 public:
  /// Throws Errc::Offline when offline is set.
  ChatCompletionsClient(std::string base_url, std::string api_key, std::string model, bool offline);
  LlmReply complete(const std::string& prompt) override;

 private:
  std::string base_url_;
  std::string api_key_;
  std::string model_;
};

/// Strips JATS/HTML tags and collapses whitespace.
std::string strip_markup(const std::string& text);

}  // namespace crystalign
