#include "earnet/serve.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "earnet/errors.hpp"
#include "earnet/explain.hpp"
#include "earnet/ops.hpp"

namespace earnet {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using json = nlohmann::json;

namespace {

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(beast::detail::base64::encoded_size(bytes.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::vector<std::uint8_t> out(beast::detail::base64::decoded_size(text.size()));
  // The decoder stops at '=' padding, so only the padding may be left unread.
  std::size_t body = text.size();
  while (body > 0 && text.size() - body < 2 && text[body - 1] == '=') --body;
  auto [written, read] = beast::detail::base64::decode(out.data(), text.data(), body);
  if (read != body) throw InputError("invalid base64 image payload");
  out.resize(written);
  return out;
}

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string iso_time(std::int64_t ms) {
  const std::time_t t = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                static_cast<int>(ms % 1000));
  return buf;
}

std::vector<std::string> default_names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < kDefaultClassNames.size() ? kDefaultClassNames[i] : "C" + std::to_string(i));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- inference

InferenceEngine::InferenceEngine(Network<float> model, std::vector<std::string> class_names,
                                 double sharpness_threshold)
    : model_(std::move(model)), classes_(std::move(class_names)), threshold_(sharpness_threshold) {
  const std::size_t k = model_.config().num_classes;
  if (classes_.empty()) classes_ = default_names(k);
  if (classes_.size() != k) {
    throw ConfigError(std::to_string(classes_.size()) + " class names for a " + std::to_string(k) +
                      "-way model");
  }
  if (!(threshold_ >= 0)) throw ConfigError("sharpness threshold must be >= 0");
  model_.set_mode(Mode::eval);
  model_.set_trainable(false);
}

std::shared_ptr<InferenceEngine> InferenceEngine::from_weights(const std::filesystem::path& path,
                                                               double sharpness_threshold) {
  auto info = read_weights_info(path);
  Network<float> model(info.config);
  load_weights(model, path);
  return std::make_shared<InferenceEngine>(std::move(model), info.class_names, sharpness_threshold);
}

FramePrediction InferenceEngine::infer_bytes(std::span<const std::uint8_t> bytes, bool heatmap) const {
  const auto start = std::chrono::steady_clock::now();
  return run(decode_image(bytes, "frame"), heatmap, start);
}

FramePrediction InferenceEngine::infer(const RgbImage& image, bool heatmap) const {
  return run(image, heatmap, std::chrono::steady_clock::now());
}

FramePrediction InferenceEngine::run(const RgbImage& image, bool heatmap,
                                     std::chrono::steady_clock::time_point start) const {
  if (image.empty()) throw InputError("empty frame");
  FramePrediction p;
  p.sharpness = sharpness(image);
  p.blurry = p.sharpness < threshold_;

  const std::size_t size = model_.config().input_size;
  Tensor<float> x = preprocess(image, size);
  x = reshape(x, Shape{1, 3, size, size});
  auto out = model_.forward(x);
  auto probs = softmax(out.logits3);
  p.probabilities.assign(probs.data().begin(), probs.data().end());
  auto best = std::max_element(p.probabilities.begin(), p.probabilities.end());
  p.top1_index = static_cast<int>(best - p.probabilities.begin());
  p.top1 = classes_[static_cast<std::size_t>(p.top1_index)];
  p.top1_prob = *best;

  if (heatmap) {
    Heatmap map = grad_cam(model_, x, p.top1_index);
    p.heatmap_png_base64 = base64_encode(encode_png(overlay(map, x)));
  }
  p.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return p;
}

json prediction_json(const FramePrediction& p, const std::vector<std::string>& classes) {
  json probs = json::object();
  for (std::size_t i = 0; i < p.probabilities.size() && i < classes.size(); ++i) {
    probs[classes[i]] = p.probabilities[i];
  }
  json j = {{"top1", p.top1},
            {"top1_index", p.top1_index},
            {"top1_prob", p.top1_prob},
            {"probabilities", probs},
            {"sharpness", p.sharpness},
            {"blurry", p.blurry},
            {"latency_ms", p.latency_ms},
            {"heatmap", p.heatmap_png_base64.has_value()}};
  if (p.blurry) j["advisory"] = "image looks blurry; retake the frame before relying on it";
  if (p.heatmap_png_base64) j["heatmap_png"] = *p.heatmap_png_base64;
  return j;
}

// -------------------------------------------------------------- session log

bool valid_session_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  return std::all_of(id.begin(), id.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '-';
  });
}

SessionLog::SessionLog(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

SessionLog::~SessionLog() {
  for (auto& [_, s] : sessions_) {
    if (s.fd >= 0) ::close(s.fd);
  }
}

SessionLog::State& SessionLog::open_locked(const std::string& session) {
  auto it = sessions_.find(session);
  if (it != sessions_.end()) return it->second;
  const auto path = dir_ / (session + ".jsonl");
  State st;
  bool torn_tail = false;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      torn_tail = in.eof();  // last line had no newline
      if (line.empty()) continue;
      auto rec = json::parse(line, nullptr, false);
      if (rec.is_discarded()) continue;
      st.seq = std::max<std::uint64_t>(st.seq, rec.value("seq", std::uint64_t{0}));
      st.last_ms = std::max<std::int64_t>(st.last_ms, rec.value("timestamp_ms", std::int64_t{0}));
    }
  }
  st.fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (st.fd < 0) throw IoError("cannot open session log " + path.string());
  // A write interrupted by a crash leaves a partial last line; end it so the
  // next record starts on its own line.
  if (torn_tail && ::write(st.fd, "\n", 1) != 1) {
    ::close(st.fd);
    throw IoError("cannot repair session log " + path.string());
  }
  return sessions_.emplace(session, st).first->second;
}

json SessionLog::append(const std::string& session, json record) {
  if (!valid_session_id(session)) throw InputError("invalid session id '" + session + "'");
  std::lock_guard lock(mu_);
  State& st = open_locked(session);
  const std::int64_t ts = std::max(now_ms(), st.last_ms);
  record["session"] = session;
  record["seq"] = st.seq + 1;
  record["timestamp_ms"] = ts;
  record["time"] = iso_time(ts);
  const std::string line = record.dump() + "\n";
  std::size_t off = 0;
  while (off < line.size()) {
    const ssize_t n = ::write(st.fd, line.data() + off, line.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("session log write failed for '" + session + "'");
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(st.fd) != 0) throw IoError("session log fsync failed for '" + session + "'");
  st.seq += 1;
  st.last_ms = ts;
  return record;
}

std::optional<std::vector<json>> SessionLog::read(const std::string& session) const {
  if (!valid_session_id(session)) return std::nullopt;
  std::lock_guard lock(mu_);
  std::ifstream in(dir_ / (session + ".jsonl"));
  if (!in) return std::nullopt;
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto rec = json::parse(line, nullptr, false);
    if (!rec.is_discarded()) out.push_back(std::move(rec));
  }
  return out;
}

// ------------------------------------------------------------------ server

namespace {

struct Target {
  std::string path;
  std::map<std::string, std::string> query;
};

Target parse_target(std::string_view target) {
  Target t;
  const auto q = target.find('?');
  t.path = std::string(target.substr(0, q));
  if (q == std::string_view::npos) return t;
  std::string_view rest = target.substr(q + 1);
  while (!rest.empty()) {
    const auto amp = rest.find('&');
    std::string_view kv = rest.substr(0, amp);
    const auto eq = kv.find('=');
    if (!kv.empty()) {
      t.query[std::string(kv.substr(0, eq))] =
          eq == std::string_view::npos ? "" : std::string(kv.substr(eq + 1));
    }
    if (amp == std::string_view::npos) break;
    rest = rest.substr(amp + 1);
  }
  return t;
}

bool parse_flag(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v.empty()) return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw InputError("expected a boolean flag, got '" + v + "'");
}

}  // namespace

struct Server::Impl {
  ServeConfig cfg;
  std::shared_ptr<const InferenceEngine> engine;
  SessionLog log;
  net::io_context ioc;
  net::thread_pool pool;
  tcp::acceptor acceptor;
  std::vector<std::thread> io_threads;
  std::optional<net::executor_work_guard<net::io_context::executor_type>> guard;
  std::atomic<std::uint64_t> stream_counter{0};
  std::atomic<bool> stopping{false};

  Impl(ServeConfig c, std::shared_ptr<const InferenceEngine> e)
      : cfg(std::move(c)),
        engine(std::move(e)),
        log(cfg.log_dir),
        pool(std::max<std::size_t>(cfg.workers, 1)),
        acceptor(net::make_strand(ioc)) {}

  void do_accept();

  // Runs on a worker thread: inference, logging and the JSON reply body.
  json infer_and_log(const std::vector<std::uint8_t>& bytes, bool heatmap,
                     const std::string& session) {
    if (cfg.inference_delay.count() > 0) std::this_thread::sleep_for(cfg.inference_delay);
    FramePrediction p = engine->infer_bytes(bytes, heatmap);
    json body = prediction_json(p, engine->class_names());
    json rec = body;
    rec.erase("heatmap_png");
    if (!p.blurry) {
      rec = log.append(session, std::move(rec));
      body["logged"] = true;
      body["seq"] = rec["seq"];
    } else {
      body["logged"] = false;
    }
    body["session"] = session;
    body["timestamp_ms"] = rec.value("timestamp_ms", now_ms());
    return body;
  }
};

namespace {

using Response = http::response<http::string_body>;

Response json_response(unsigned version, bool keep_alive, http::status status, const json& body) {
  Response res{status, version};
  res.set(http::field::server, std::string("earnet/") + kServiceVersion);
  res.set(http::field::content_type, "application/json");
  res.keep_alive(keep_alive);
  res.body() = body.dump();
  res.prepare_payload();
  return res;
}

Response error_response(unsigned version, bool keep_alive, http::status status,
                        const std::string& msg) {
  return json_response(version, keep_alive, status, json{{"error", msg}});
}

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket&& socket, Server::Impl* srv, std::string session,
            bool heatmap)
      : ws_(std::move(socket)), srv_(srv), session_(std::move(session)), heatmap_(heatmap) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.read_message_max(srv_->cfg.max_body_bytes);
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    queue(json{{"type", "hello"}, {"session", session_}}.dump());
    do_read();
  }

  void do_read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      closed_ = true;
      return;
    }
    auto data = buffer_.data();
    const auto* p = static_cast<const std::uint8_t*>(data.data());
    std::vector<std::uint8_t> frame(p, p + data.size());
    buffer_.consume(buffer_.size());
    if (busy_) {
      // Single-slot buffer: a newer frame replaces the waiting one.
      if (pending_) ++dropped_;
      pending_ = std::move(frame);
    } else {
      start(std::move(frame));
    }
    do_read();
  }

  void start(std::vector<std::uint8_t> frame) {
    busy_ = true;
    net::post(srv_->pool, [self = shared_from_this(), frame = std::move(frame)] {
      std::string msg;
      try {
        json body = self->srv_->infer_and_log(frame, self->heatmap_, self->session_);
        body["type"] = "prediction";
        msg = body.dump();
      } catch (const std::exception& e) {
        msg = json{{"type", "error"}, {"error", e.what()}}.dump();
      }
      net::post(self->ws_.get_executor(),
                [self, msg = std::move(msg)]() mutable { self->on_result(std::move(msg)); });
    });
  }

  void on_result(std::string msg) {
    busy_ = false;
    queue(std::move(msg));
    const auto now = std::chrono::steady_clock::now();
    if (dropped_ > notified_ &&
        (!pending_ || now - last_notice_ >= srv_->cfg.notice_interval)) {
      notified_ = dropped_;
      last_notice_ = now;
      queue(json{{"type", "notice"}, {"dropped", dropped_}}.dump());
    }
    if (pending_ && !closed_) {
      auto next = std::move(*pending_);
      pending_.reset();
      start(std::move(next));
    }
  }

  void queue(std::string msg) {
    if (closed_) return;
    out_.push_back(std::move(msg));
    if (out_.size() == 1) do_write();
  }

  void do_write() {
    ws_.text(true);
    ws_.async_write(net::buffer(out_.front()),
                    beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) {
      closed_ = true;
      out_.clear();
      return;
    }
    out_.pop_front();
    if (!out_.empty()) do_write();
  }

  websocket::stream<beast::tcp_stream> ws_;
  Server::Impl* srv_;
  std::string session_;
  bool heatmap_;
  beast::flat_buffer buffer_;
  std::deque<std::string> out_;
  std::optional<std::vector<std::uint8_t>> pending_;
  bool busy_ = false;
  bool closed_ = false;
  std::uint64_t dropped_ = 0, notified_ = 0;
  std::chrono::steady_clock::time_point last_notice_{};
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, Server::Impl* srv)
      : stream_(std::move(socket)), srv_(srv) {}

  void run() {
    net::dispatch(stream_.get_executor(),
                  beast::bind_front_handler(&HttpSession::do_read, shared_from_this()));
  }

 private:
  void do_read() {
    parser_.emplace();
    parser_->body_limit(srv_->cfg.max_body_bytes);
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, *parser_,
                     beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec == http::error::end_of_stream) {
      beast::error_code ignore;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignore);
      return;
    }
    if (ec == http::error::body_limit) {
      send(error_response(11, false, http::status::payload_too_large, "request body too large"));
      return;
    }
    if (ec) return;
    auto req = parser_->release();
    if (websocket::is_upgrade(req)) {
      upgrade(std::move(req));
      return;
    }
    handle(std::move(req));
  }

  void upgrade(http::request<http::string_body> req) {
    Target t = parse_target(std::string_view(req.target().data(), req.target().size()));
    if (t.path != "/stream") {
      send(error_response(req.version(), false, http::status::not_found, "no websocket at " + t.path));
      return;
    }
    if (!srv_->engine) {
      send(error_response(req.version(), false, http::status::service_unavailable, "no model loaded"));
      return;
    }
    std::string session = "stream-" + std::to_string(now_ms()) + "-" +
                          std::to_string(srv_->stream_counter.fetch_add(1));
    bool heatmap = srv_->cfg.heatmap_default;
    try {
      if (t.query.count("session")) session = t.query["session"];
      if (t.query.count("heatmap")) heatmap = parse_flag(t.query["heatmap"]);
      if (!valid_session_id(session)) throw InputError("invalid session id");
    } catch (const InputError& e) {
      send(error_response(req.version(), false, http::status::bad_request, e.what()));
      return;
    }
    stream_.expires_never();
    std::make_shared<WsSession>(stream_.release_socket(), srv_, session, heatmap)->run(std::move(req));
  }

  void handle(http::request<http::string_body> req) {
    const unsigned ver = req.version();
    const bool ka = req.keep_alive();
    Target t = parse_target(std::string_view(req.target().data(), req.target().size()));

    if (t.path == "/health") {
      if (req.method() != http::verb::get) {
        return send(error_response(ver, ka, http::status::method_not_allowed, "use GET"));
      }
      json body = {{"status", srv_->engine ? "ok" : "no-model"}, {"version", kServiceVersion}};
      if (srv_->engine) {
        const auto& m = srv_->engine->model();
        body["model"] = to_string(m.config().arch);
        body["classes"] = srv_->engine->class_names();
        body["params"] = m.parameter_count();
        body["input_size"] = m.config().input_size;
      }
      return send(json_response(ver, ka, http::status::ok, body));
    }

    if (t.path.rfind("/sessions/", 0) == 0) {
      if (req.method() != http::verb::get) {
        return send(error_response(ver, ka, http::status::method_not_allowed, "use GET"));
      }
      const std::string id = t.path.substr(10);
      if (!valid_session_id(id)) {
        return send(error_response(ver, ka, http::status::bad_request, "invalid session id"));
      }
      auto records = srv_->log.read(id);
      if (!records) {
        return send(error_response(ver, ka, http::status::not_found, "no session '" + id + "'"));
      }
      return send(json_response(ver, ka, http::status::ok, json{{"session", id}, {"records", *records}}));
    }

    if (t.path == "/infer") {
      if (req.method() != http::verb::post) {
        return send(error_response(ver, ka, http::status::method_not_allowed, "use POST"));
      }
      if (!srv_->engine) {
        return send(error_response(ver, ka, http::status::service_unavailable, "no model loaded"));
      }
      std::vector<std::uint8_t> bytes;
      std::string session = "default";
      bool heatmap = srv_->cfg.heatmap_default;
      try {
        if (t.query.count("session")) session = t.query["session"];
        if (t.query.count("heatmap")) heatmap = parse_flag(t.query["heatmap"]);
        const auto ctype = std::string(req[http::field::content_type]);
        if (ctype.rfind("application/json", 0) == 0) {
          auto j = json::parse(req.body(), nullptr, false);
          if (j.is_discarded() || !j.is_object() || !j.contains("image") || !j["image"].is_string()) {
            throw InputError("JSON body must be an object with a base64 'image' string");
          }
          bytes = base64_decode(j["image"].get<std::string>());
          if (j.contains("session")) session = j["session"].get<std::string>();
          if (j.contains("heatmap")) heatmap = j["heatmap"].get<bool>();
        } else {
          bytes.assign(req.body().begin(), req.body().end());
        }
        if (bytes.empty()) throw InputError("empty request body");
        if (!valid_session_id(session)) throw InputError("invalid session id '" + session + "'");
      } catch (const std::exception& e) {
        return send(error_response(ver, ka, http::status::bad_request, e.what()));
      }
      net::post(srv_->pool, [self = shared_from_this(), bytes = std::move(bytes), heatmap, session,
                             ver, ka] {
        Response res;
        try {
          res = json_response(ver, ka, http::status::ok, self->srv_->infer_and_log(bytes, heatmap, session));
        } catch (const InputError& e) {
          res = error_response(ver, ka, http::status::bad_request, e.what());
        } catch (const std::exception& e) {
          res = error_response(ver, ka, http::status::internal_server_error, e.what());
        }
        net::post(self->stream_.get_executor(),
                  [self, res = std::move(res)]() mutable { self->send(std::move(res)); });
      });
      return;
    }
    send(error_response(ver, ka, http::status::not_found, "no route for " + t.path));
  }

  void send(Response res) {
    auto sp = std::make_shared<Response>(std::move(res));
    http::async_write(stream_, *sp,
                      [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
                        self->on_write(sp->need_eof(), ec);
                      });
  }

  void on_write(bool close, beast::error_code ec) {
    if (ec) return;
    if (close) {
      beast::error_code ignore;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignore);
      return;
    }
    do_read();
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  std::optional<http::request_parser<http::string_body>> parser_;
  Server::Impl* srv_;
};

}  // namespace

void Server::Impl::do_accept() {
  acceptor.async_accept(net::make_strand(ioc), [self = this](beast::error_code ec, tcp::socket socket) {
    if (ec) {
      if (self->stopping) return;
    } else {
      std::make_shared<HttpSession>(std::move(socket), self)->run();
    }
    if (!self->stopping) self->do_accept();
  });
}

Server::Server(ServeConfig cfg, std::shared_ptr<const InferenceEngine> engine)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(engine))) {}

Server::~Server() { stop(); }

void Server::start() {
  auto& im = *impl_;
  if (im.guard) throw ContractError("server already started");
  beast::error_code ec;
  const auto addr = net::ip::make_address(im.cfg.host, ec);
  if (ec) throw ConfigError("invalid host '" + im.cfg.host + "'");
  const tcp::endpoint ep{addr, im.cfg.port};
  im.acceptor.open(ep.protocol(), ec);
  if (!ec) im.acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) im.acceptor.bind(ep, ec);
  if (!ec) im.acceptor.listen(net::socket_base::max_listen_connections, ec);
  if (ec) {
    throw IoError("cannot listen on " + im.cfg.host + ":" + std::to_string(im.cfg.port) + ": " +
                  ec.message());
  }
  im.guard.emplace(im.ioc.get_executor());
  impl_->do_accept();
  for (std::size_t i = 0; i < std::max<std::size_t>(im.cfg.io_threads, 1); ++i) {
    im.io_threads.emplace_back([&im] { im.ioc.run(); });
  }
}

std::uint16_t Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::stop() {
  if (!impl_) return;
  auto& im = *impl_;
  if (im.stopping.exchange(true)) return;
  net::post(im.acceptor.get_executor(), [&im] {
    beast::error_code ignore;
    im.acceptor.close(ignore);
  });
  im.pool.join();
  im.guard.reset();
  im.ioc.stop();
  for (auto& t : im.io_threads) t.join();
  im.io_threads.clear();
}

}  // namespace earnet
