#pragma once

// Frame inference, per-session prediction logs, and the HTTP / WebSocket
// service built on them.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "earnet/datapipe.hpp"
#include "earnet/model.hpp"

namespace earnet {

inline constexpr const char* kServiceVersion = "0.1.0";

struct FramePrediction {
  std::vector<float> probabilities;
  int top1_index = -1;
  std::string top1;
  float top1_prob = 0;
  double sharpness = 0;
  bool blurry = false;
  double latency_ms = 0;  // decode through softmax (and heat map, when asked)
  std::optional<std::string> heatmap_png_base64;
};

// Eval-mode, frozen model plus its class names; const methods may be called
// from several threads at once.
class InferenceEngine {
 public:
  // Empty `class_names` falls back to the default names (C<i> beyond nine).
  InferenceEngine(Network<float> model, std::vector<std::string> class_names = {},
                  double sharpness_threshold = kDefaultSharpnessThreshold);

  static std::shared_ptr<InferenceEngine> from_weights(
      const std::filesystem::path& path, double sharpness_threshold = kDefaultSharpnessThreshold);

  FramePrediction infer_bytes(std::span<const std::uint8_t> bytes, bool heatmap) const;
  FramePrediction infer(const RgbImage& image, bool heatmap) const;

  const Network<float>& model() const { return model_; }
  const std::vector<std::string>& class_names() const { return classes_; }
  double sharpness_threshold() const { return threshold_; }

 private:
  FramePrediction run(const RgbImage& image, bool heatmap,
                      std::chrono::steady_clock::time_point start) const;

  Network<float> model_;
  std::vector<std::string> classes_;
  double threshold_;
};

nlohmann::json prediction_json(const FramePrediction& p, const std::vector<std::string>& classes);

// Session ids are 1-64 characters from [A-Za-z0-9_-].
bool valid_session_id(const std::string& id);

// Append-only dir/<session>.jsonl files, one JSON record per line. Appends
// are serialised through one lock and fsync'd before returning. Each record
// gets `session`, a per-session `seq` (from 1) and a non-decreasing
// `timestamp_ms`; an existing file is continued after a restart.
class SessionLog {
 public:
  explicit SessionLog(std::filesystem::path dir);
  ~SessionLog();
  SessionLog(const SessionLog&) = delete;
  SessionLog& operator=(const SessionLog&) = delete;

  nlohmann::json append(const std::string& session, nlohmann::json record);
  // nullopt when the session has no log.
  std::optional<std::vector<nlohmann::json>> read(const std::string& session) const;

  const std::filesystem::path& dir() const { return dir_; }

 private:
  struct State {
    int fd = -1;
    std::uint64_t seq = 0;
    std::int64_t last_ms = 0;
  };
  State& open_locked(const std::string& session);

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, State> sessions_;
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 8080;  // 0 picks a free port
  std::size_t workers = 2;     // inference threads
  std::size_t io_threads = 1;
  bool heatmap_default = false;
  std::filesystem::path log_dir = "sessions";
  std::size_t max_body_bytes = 16u << 20;
  std::chrono::milliseconds notice_interval{500};
  // Test hook: extra delay per inference, to provoke frame dropping.
  std::chrono::milliseconds inference_delay{0};
};

// GET /health, POST /infer, GET /sessions/{id}, WebSocket /stream. A null
// engine answers /infer and /stream with 503.
class Server {
 public:
  Server(ServeConfig cfg, std::shared_ptr<const InferenceEngine> engine);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and starts serving on background threads.
  void start();
  std::uint16_t port() const;
  // Stops accepting, finishes in-flight inferences, closes connections.
  void stop();

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace earnet
