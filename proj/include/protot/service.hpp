#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "protot/interpretability.hpp"
#include "protot/model.hpp"
#include "protot/tokenizer.hpp"

namespace protot {

struct HttpResponse {
  int status = 200;
  std::string body;
};

using QueryParams = std::map<std::string, std::string>;

class RequestHandler {
 public:
  virtual ~RequestHandler() = default;
  virtual HttpResponse handle(std::string_view method, std::string_view path, const QueryParams& query,
                              std::string_view body) const = 0;
};

/// JSON API over one loaded checkpoint:
///   GET  /api/config
///   GET  /api/prototypes/{layer}
///   GET  /api/prototypes/{layer}/{k}/top?n=10
///   POST /api/intervene
///   POST /api/generate
/// Errors come back as {"error": code, "message": ...}. The model is shared
/// read-only; interventions build per-request views.
template <typename Scalar>
class ExplorerService : public RequestHandler {
 public:
  ExplorerService(LanguageModel<Scalar> model, BpeVocab vocab, std::vector<ActivationTrace> traces,
                  std::string checkpoint_id = {});

  HttpResponse handle(std::string_view method, std::string_view path, const QueryParams& query,
                      std::string_view body) const override;

  const LanguageModel<Scalar>& model() const { return model_; }

 private:
  nlohmann::json config_json() const;
  nlohmann::json layer_json(int layer) const;
  nlohmann::json top_json(int layer, int k, std::size_t n) const;
  nlohmann::json intervene_json(const nlohmann::json& req) const;
  nlohmann::json generate_json(const nlohmann::json& req) const;

  LanguageModel<Scalar> model_;
  BpeVocab vocab_;
  std::vector<ActivationTrace> traces_;
  std::string checkpoint_id_;
  std::vector<nlohmann::json> layer_cache_;
};

/// httplib server bound to a handler. bind() with port 0 picks a free port.
class HttpServer {
 public:
  explicit HttpServer(const RequestHandler& handler);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Traces for the service, cached as JSONL under `dir` keyed by the
/// checkpoint and dataset hashes.
template <typename Scalar>
std::vector<ActivationTrace> cached_traces(const LanguageModel<Scalar>& model, std::uint64_t checkpoint_hash,
                                           const std::vector<std::vector<TokenId>>& sequences,
                                           std::uint64_t data_hash, const std::filesystem::path& dir);

}  // namespace protot
