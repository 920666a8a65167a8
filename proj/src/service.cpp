#include "protot/service.hpp"

#include <charconv>

#include "httplib.h"

namespace protot {

namespace {

using nlohmann::json;

// Client mistakes; reported as 400.
class BadRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Decoded token pieces can split a UTF-8 sequence.
HttpResponse reply(int status, const json& j) { return {status, j.dump(-1, ' ', false, json::error_handler_t::replace)}; }

HttpResponse error_reply(int status, std::string_view code, std::string_view message) {
  return reply(status, {{"error", code}, {"message", message}});
}

std::vector<std::string_view> split_path(std::string_view path) {
  std::vector<std::string_view> parts;
  while (!path.empty()) {
    const auto slash = path.find('/');
    const auto part = path.substr(0, slash);
    if (!part.empty()) parts.push_back(part);
    if (slash == std::string_view::npos) break;
    path.remove_prefix(slash + 1);
  }
  return parts;
}

int parse_int(std::string_view s, const char* what) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw BadRequest(std::string(what) + " must be an integer, got '" + std::string(s) + "'");
  return v;
}

template <typename T>
T field(const json& req, const char* name) {
  if (!req.contains(name)) throw BadRequest(std::string("missing field '") + name + "'");
  try {
    return req.at(name).get<T>();
  } catch (const json::exception&) {
    throw BadRequest(std::string("field '") + name + "' has the wrong type");
  }
}

template <typename T>
T field_or(const json& req, const char* name, T fallback) {
  return req.contains(name) ? field<T>(req, name) : fallback;
}

InterventionMode mode_from(std::string name) {
  for (auto& c : name)
    if (c == '-') c = '_';
  return parse_intervention_mode(name);
}

template <typename V>
std::vector<double> to_vec(const V& v) {
  std::vector<double> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(v(i));
  return out;
}

}  // namespace

template <typename Scalar>
ExplorerService<Scalar>::ExplorerService(LanguageModel<Scalar> model, BpeVocab vocab,
                                         std::vector<ActivationTrace> traces, std::string checkpoint_id)
    : model_(std::move(model)),
      vocab_(std::move(vocab)),
      traces_(std::move(traces)),
      checkpoint_id_(std::move(checkpoint_id)) {
  if (vocab_.size() > model_.config.vocab_size)
    throw ConfigError("vocabulary has " + std::to_string(vocab_.size()) + " entries but the model only " +
                      std::to_string(model_.config.vocab_size));
  for (const auto& t : traces_)
    if (t.layers.size() != model_.blocks.size())
      throw ConfigError("trace " + std::to_string(t.seq_id) + " does not match the model's layer count");
  for (int l = 0; l < static_cast<int>(model_.blocks.size()); ++l) layer_cache_.push_back(layer_json(l));
}

template <typename Scalar>
json ExplorerService<Scalar>::config_json() const {
  json j = model_.config.to_json();
  j["grid"] = {{"layers", model_.config.layers}, {"prototypes", model_.config.prototypes}};
  j["dtype"] = dtype_name<Scalar>();
  j["checkpoint"] = checkpoint_id_;
  j["traces"] = traces_.size();
  j["vocab_entries"] = vocab_.size();
  return j;
}

template <typename Scalar>
json ExplorerService<Scalar>::layer_json(int layer) const {
  const auto& mixer = model_.blocks[static_cast<std::size_t>(layer)].mixer;
  json protos = json::array();
  for (int k = 0; k < mixer.channels(); ++k) {
    json p = {{"k", k}, {"half_life", half_life(static_cast<double>(mixer.gamma(k)))}};
    if (traces_.empty()) {
      p["l1_sparsity"] = nullptr;
      p["gini"] = nullptr;
      p["entropy"] = nullptr;
    } else {
      const auto cols = prototype_columns(traces_, layer, k);
      const auto s = l1_sparsity(cols), g = gini(cols), e = entropy(cols);
      auto value = [](const MetricResult& r) -> json { return r.used ? json(r.value) : json(nullptr); };
      p["l1_sparsity"] = value(s);
      p["gini"] = value(g);
      p["entropy"] = value(e);
    }
    protos.push_back(std::move(p));
  }
  return {{"layer", layer}, {"alpha", static_cast<double>(mixer.alpha)}, {"prototypes", protos}};
}

template <typename Scalar>
json ExplorerService<Scalar>::top_json(int layer, int k, std::size_t n) const {
  const auto& mixer = model_.blocks[static_cast<std::size_t>(layer)].mixer;
  if (k < 0 || k >= mixer.channels())
    throw BadRequest("prototype " + std::to_string(k) + " out of range [0, " + std::to_string(mixer.channels()) +
                     ")");
  PrototypeReport rep;
  if (traces_.empty()) {
    rep.layer = layer;
    rep.k = k;
    rep.short_list = n > 0;
  } else {
    rep = top_sequences(traces_, layer, k, n);
  }
  rep.half_life = half_life(static_cast<double>(mixer.gamma(k)));
  json j = rep.to_json(&vocab_);
  j["n"] = n;
  if (auto r = repetition_score(rep)) j["repetition"] = *r;
  return j;
}

template <typename Scalar>
json ExplorerService<Scalar>::intervene_json(const json& req) const {
  InterventionSpec spec;
  spec.layer = field<int>(req, "layer");
  spec.k = field<int>(req, "k");
  spec.mode = mode_from(field<std::string>(req, "mode"));
  spec.seed = field_or<std::uint64_t>(req, "seed", 0);
  const auto context = field<std::string>(req, "context");
  const auto target = field<std::string>(req, "target");
  const InterventionView<Scalar> view(model_, spec);
  json j = probability_delta(model_, view, vocab_, context, target).to_json();
  j["layer"] = spec.layer;
  j["k"] = spec.k;
  j["mode"] = intervention_mode_name(spec.mode);
  j["seed"] = spec.seed;
  return j;
}

template <typename Scalar>
json ExplorerService<Scalar>::generate_json(const json& req) const {
  const auto prompt = field<std::string>(req, "prompt");
  GenerateOptions opts;
  opts.max_new = field_or<int>(req, "max_new", 50);
  if (opts.max_new < 0 || opts.max_new > 4096) throw BadRequest("max_new must be in [0, 4096]");
  auto strategy = field_or<std::string>(req, "strategy", "greedy");
  for (auto& c : strategy)
    if (c == '-') c = '_';
  if (strategy == "greedy")
    opts.strategy.kind = SamplingStrategy::Kind::kGreedy;
  else if (strategy == "top_k")
    opts.strategy.kind = SamplingStrategy::Kind::kTopK;
  else
    throw BadRequest("unknown strategy '" + strategy + "' (expected greedy or top_k)");
  opts.strategy.top_k = field_or<int>(req, "top_k", opts.strategy.top_k);
  opts.strategy.temperature = field_or<double>(req, "temperature", opts.strategy.temperature);
  opts.seed = field_or<std::uint64_t>(req, "seed", 0);
  opts.stop_token = vocab_.eos();
  const bool capture = field_or<bool>(req, "capture", false);

  const auto ids = vocab_.encode(prompt);
  const auto gen = generate(model_, std::span<const TokenId>(ids), opts, nullptr, capture);
  const std::span<const TokenId> all(gen.tokens);
  json j = {{"prompt", prompt},
            {"text", vocab_.decode(all)},
            {"completion", vocab_.decode(all.subspan(ids.size()))},
            {"tokens", gen.tokens},
            {"prompt_tokens", ids.size()}};
  if (capture) {
    json steps = json::array();
    for (const auto& g : gen.gates) {
      json w = json::array(), r = json::array();
      for (const auto& v : g.write) w.push_back(to_vec(v));
      for (const auto& v : g.read) r.push_back(to_vec(v));
      steps.push_back({{"write", w}, {"read", r}});
    }
    j["gates"] = steps;
  }
  return j;
}

template <typename Scalar>
HttpResponse ExplorerService<Scalar>::handle(std::string_view method, std::string_view path,
                                             const QueryParams& query, std::string_view body) const {
  try {
    const auto parts = split_path(path);
    if (parts.size() < 2 || parts[0] != "api") return error_reply(404, "not_found", "no route " + std::string(path));

    if (method == "GET") {
      if (parts.size() == 2 && parts[1] == "config") return reply(200, config_json());
      if (parts[1] == "prototypes" && (parts.size() == 3 || (parts.size() == 5 && parts[4] == "top"))) {
        const int layer = parse_int(parts[2], "layer");
        if (layer < 0 || layer >= static_cast<int>(model_.blocks.size()))
          throw BadRequest("layer " + std::to_string(layer) + " out of range [0, " +
                           std::to_string(model_.blocks.size()) + ")");
        if (parts.size() == 3) return reply(200, layer_cache_[static_cast<std::size_t>(layer)]);
        const int k = parse_int(parts[3], "k");
        int n = 10;
        if (auto it = query.find("n"); it != query.end()) n = parse_int(it->second, "n");
        if (n < 1) throw BadRequest("n must be positive");
        return reply(200, top_json(layer, k, static_cast<std::size_t>(n)));
      }
    } else if (method == "POST" && parts.size() == 2 && (parts[1] == "intervene" || parts[1] == "generate")) {
      json req;
      try {
        req = json::parse(body);
      } catch (const json::exception& e) {
        throw BadRequest(std::string("malformed JSON body: ") + e.what());
      }
      if (!req.is_object()) throw BadRequest("request body must be a JSON object");
      return reply(200, parts[1] == "intervene" ? intervene_json(req) : generate_json(req));
    }
    return error_reply(404, "not_found", "no route " + std::string(method) + " " + std::string(path));
  } catch (const BadRequest& e) {
    return error_reply(400, "bad_request", e.what());
  } catch (const DomainError& e) {
    return error_reply(400, "domain_error", e.what());
  } catch (const ConfigError& e) {
    return error_reply(400, "config_error", e.what());
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  explicit Impl(const RequestHandler& h) : handler(h) {}
  const RequestHandler& handler;
  httplib::Server server;
};

HttpServer::HttpServer(const RequestHandler& handler) : impl_(std::make_unique<Impl>(handler)) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    QueryParams q;
    for (const auto& [k, v] : req.params) q.emplace(k, v);
    const auto out = impl_->handler.handle(req.method, req.path, q, req.body);
    res.status = out.status;
    res.set_content(out.body, "application/json; charset=utf-8");
  };
  impl_->server.Get(R"(/api/.*)", route);
  impl_->server.Post(R"(/api/.*)", route);
  impl_->server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const auto out = error_reply(res.status, res.status == 404 ? "not_found" : "http_error",
                                 "no route " + req.method + " " + req.path);
    res.set_content(out.body, "application/json; charset=utf-8");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = -1;
  if (port == 0)
    bound = impl_->server.bind_to_any_port(host);
  else if (impl_->server.bind_to_port(host, port))
    bound = port;
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

// ---------------------------------------------------------------------------

template <typename Scalar>
std::vector<ActivationTrace> cached_traces(const LanguageModel<Scalar>& model, std::uint64_t checkpoint_hash,
                                           const std::vector<std::vector<TokenId>>& sequences,
                                           std::uint64_t data_hash, const std::filesystem::path& dir) {
  const auto path = dir / ("traces_" + hex64(checkpoint_hash) + "_" + hex64(data_hash) + ".jsonl");
  if (std::filesystem::exists(path)) return read_traces_jsonl(path);
  auto traces = capture(model, sequences);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto tmp = path.string() + ".tmp";
  write_traces_jsonl(tmp, traces);
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + ": " + ec.message());
  return traces;
}

template class ExplorerService<float>;
template class ExplorerService<double>;
template std::vector<ActivationTrace> cached_traces<float>(const LanguageModel<float>&, std::uint64_t,
                                                           const std::vector<std::vector<TokenId>>&,
                                                           std::uint64_t, const std::filesystem::path&);
template std::vector<ActivationTrace> cached_traces<double>(const LanguageModel<double>&, std::uint64_t,
                                                            const std::vector<std::vector<TokenId>>&,
                                                            std::uint64_t, const std::filesystem::path&);

}  // namespace protot
