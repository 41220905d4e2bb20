#pragma once

// Local HTTP service exposing live sessions: question/answer round trips,
// per-slice overlays and a long-poll event stream.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "hfseg/config.hpp"
#include "hfseg/session.hpp"

namespace hfseg {

class NotFound : public Error {
 public:
  using Error::Error;
};

class Conflict : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Slice run-length encoding

/// One run of equal values in a row-major flattened slice.
struct Run {
  std::uint32_t start = 0;
  std::uint32_t length = 0;
  std::uint32_t value = 0;
  bool operator==(const Run&) const = default;
};

struct Slice {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> values;  // row-major, width * height
};

/// axis 0 -> (y, z) plane, 1 -> (x, z), 2 -> (x, y); u runs along the row.
inline void slice_plane(const Dims& d, int axis, int& width, int& height) {
  switch (axis) {
    case 0: width = d.ny; height = d.nz; return;
    case 1: width = d.nx; height = d.nz; return;
    case 2: width = d.nx; height = d.ny; return;
    default: throw InvalidArgument("axis must be 0, 1 or 2");
  }
}

inline Index3 slice_voxel(int axis, int slice, int u, int v) {
  switch (axis) {
    case 0: return {slice, u, v};
    case 1: return {u, slice, v};
    default: return {u, v, slice};
  }
}

inline int axis_extent(const Dims& d, int axis) { return axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz; }

template <class T>
Slice extract_slice(const Field<T>& f, int axis, int slice) {
  Slice s;
  slice_plane(f.dims(), axis, s.width, s.height);
  if (slice < 0 || slice >= axis_extent(f.dims(), axis)) throw InvalidArgument("slice index out of range");
  s.values.resize(std::size_t(s.width) * s.height);
  for (int v = 0; v < s.height; ++v)
    for (int u = 0; u < s.width; ++u) s.values[std::size_t(v) * s.width + u] = f.at(slice_voxel(axis, slice, u, v));
  return s;
}

inline std::vector<Run> rle_encode(const std::vector<std::uint32_t>& values) {
  std::vector<Run> runs;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!runs.empty() && runs.back().value == values[i]) {
      ++runs.back().length;
    } else {
      runs.push_back({static_cast<std::uint32_t>(i), 1, values[i]});
    }
  }
  return runs;
}

inline std::vector<std::uint32_t> rle_decode(const std::vector<Run>& runs, std::size_t size) {
  std::vector<std::uint32_t> out(size);
  std::size_t next = 0;
  for (const Run& r : runs) {
    if (r.start != next || r.length == 0 || std::size_t(r.start) + r.length > size) {
      throw FormatError("malformed run-length encoding");
    }
    std::fill_n(out.begin() + r.start, r.length, r.value);
    next = r.start + r.length;
  }
  if (next != size) throw FormatError("run-length encoding does not cover the slice");
  return out;
}

inline nlohmann::json runs_to_json(const std::vector<Run>& runs) {
  nlohmann::json j = nlohmann::json::array();
  for (const Run& r : runs) j.push_back({r.start, r.length, r.value});
  return j;
}

inline std::vector<Run> runs_from_json(const nlohmann::json& j) {
  std::vector<Run> runs;
  for (const auto& r : j) {
    const auto a = r.get<std::array<std::uint32_t, 3>>();
    runs.push_back({a[0], a[1], a[2]});
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Registry of named inputs

struct Resources {
  std::map<std::string, std::shared_ptr<const ScalarField3D>> volumes;
  std::map<std::string, std::shared_ptr<const ProbabilityMap>> maps;
  std::map<std::string, std::shared_ptr<const ShapeModel>> models;
};

// ---------------------------------------------------------------------------
// Session host

/// A session plus its message log. Mutations are serialized by `work_`;
/// overlay reads use the snapshot pointer under the short `snap_` lock.
class HostedSession {
 public:
  HostedSession(std::string id, std::string volume, std::unique_ptr<Session> session)
      : id_(std::move(id)), volume_(std::move(volume)), session_(std::move(session)), snapshot_(session_->snapshot()) {}

  const std::string& id() const { return id_; }
  const std::string& volume() const { return volume_; }
  const Dims& dims() const { return session_->dims(); }

  nlohmann::json question() {
    std::lock_guard lock(work_);
    nlohmann::json payload;
    try {
      const Index3 v = session_->ask();
      payload = {{"voxel", {v.x, v.y, v.z}}, {"slice", v.z}, {"remaining", session_->remaining()},
                 {"final_available", false}};
    } catch (const BudgetExhausted&) {
      payload = {{"voxel", nullptr}, {"remaining", 0}, {"final_available", true}, {"reason", "budget"}};
    } catch (const SessionConverged&) {
      payload = {{"voxel", nullptr}, {"remaining", session_->remaining()}, {"final_available", true},
                 {"reason", "converged"}};
    }
    publish_snapshot();
    return emit("question", std::move(payload));
  }

  nlohmann::json answer(int label) {
    std::lock_guard lock(work_);
    if (label != 0 && label != 1) throw InvalidArgument("label must be 0 or 1");
    Seed seed;
    try {
      seed = session_->answer(label);
    } catch (const NoPendingQuestion&) {
      throw Conflict("no pending question to answer");
    }
    publish_snapshot();
    const auto& rec = session_->records().back();
    return emit("answer", {{"k", seed.question},
                           {"voxel", {seed.location.x, seed.location.y, seed.location.z}},
                           {"label", seed.label},
                           {"epsilon", rec.epsilon},
                           {"beta", rec.beta},
                           {"remaining", session_->remaining()}});
  }

  nlohmann::json final_result() {
    std::lock_guard lock(work_);
    if (!final_) final_ = session_->final_segmentation();
    publish_snapshot();
    return emit("final", {{"state", to_json(final_->state)},
                          {"score", final_->score},
                          {"penalty", final_->penalty},
                          {"violated_seeds", final_->violated},
                          {"foreground_voxels", count_foreground(final_->mask)},
                          {"answered", session_->seeds().size()},
                          {"beta", session_->beta()}});
  }

  nlohmann::json overlay(int axis, int slice) {
    const auto snap = snapshot();
    Slice counts = extract_slice(snap->counts, axis, slice);
    Slice best = extract_slice(snap->best_mask, axis, slice);
    nlohmann::json marker = nullptr;
    if (snap->question) {
      const Index3 q = *snap->question;
      const int qs = axis == 0 ? q.x : axis == 1 ? q.y : q.z;
      if (qs == slice) {
        marker = axis == 0 ? nlohmann::json{q.y, q.z} : axis == 1 ? nlohmann::json{q.x, q.z} : nlohmann::json{q.x, q.y};
      }
    }
    return emit("overlay", {{"axis", axis},
                            {"slice", slice},
                            {"width", counts.width},
                            {"height", counts.height},
                            {"n_candidates", snap->n_candidates},
                            {"counts", runs_to_json(rle_encode(counts.values))},
                            {"best", runs_to_json(rle_encode(best.values))},
                            {"question", marker},
                            {"answered", snap->answered},
                            {"beta", snap->beta}});
  }

  nlohmann::json telemetry() {
    std::lock_guard lock(work_);
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : session_->records()) records.push_back(to_json(r));
    return emit("telemetry", {{"questions", records}, {"beta", session_->beta()}});
  }

  /// Messages with seq > after, waiting up to `timeout` for one to appear.
  nlohmann::json events(std::uint64_t after, std::chrono::milliseconds timeout) {
    std::unique_lock lock(log_mu_);
    log_cv_.wait_for(lock, timeout, [&] { return seq_ > after; });
    nlohmann::json out = nlohmann::json::array();
    for (const auto& m : log_) {
      if (m.at("seq").get<std::uint64_t>() > after) out.push_back(m);
    }
    return out;
  }

  std::shared_ptr<const SessionSnapshot> snapshot() const {
    std::lock_guard lock(snap_);
    return snapshot_;
  }

  /// Seed log for inspection; takes the mutation lock.
  std::vector<Seed> seeds() {
    std::lock_guard lock(work_);
    return session_->seeds();
  }

  nlohmann::json error_message(const std::string& what) { return emit("error", {{"message", what}}); }

 private:
  void publish_snapshot() {
    auto snap = session_->snapshot();
    std::lock_guard lock(snap_);
    snapshot_ = std::move(snap);
  }

  nlohmann::json emit(const char* type, nlohmann::json payload) {
    std::lock_guard lock(log_mu_);
    nlohmann::json msg = {{"type", type}, {"session", id_}, {"seq", ++seq_}, {"payload", std::move(payload)}};
    if (std::string(type) != "overlay") {
      log_.push_back(msg);
      if (log_.size() > kLogCapacity) log_.pop_front();
    }
    log_cv_.notify_all();
    return msg;
  }

  static constexpr std::size_t kLogCapacity = 256;

  std::string id_;
  std::string volume_;
  std::unique_ptr<Session> session_;
  std::optional<FinalSegmentation> final_;
  std::mutex work_;
  mutable std::mutex snap_;
  std::shared_ptr<const SessionSnapshot> snapshot_;
  std::mutex log_mu_;
  std::condition_variable log_cv_;
  std::deque<nlohmann::json> log_;
  std::uint64_t seq_ = 0;
};

class SessionRegistry {
 public:
  explicit SessionRegistry(Resources resources, SessionConfig defaults = {})
      : resources_(std::move(resources)), defaults_(std::move(defaults)) {}

  std::string create(const std::string& volume, const std::string& map, const std::string& model,
                     const nlohmann::json& overrides = nlohmann::json::object()) {
    const auto vol = lookup(resources_.volumes, volume, "volume");
    const auto pm = lookup(resources_.maps, map, "map");
    const auto sm = lookup(resources_.models, model, "model");
    require_same_dims(vol->dims(), pm->dims(), "session volume and map");
    const SessionConfig cfg = session_config_from_json(overrides, defaults_);
    std::lock_guard lock(mu_);
    const std::string id = "s" + std::to_string(++next_id_);
    sessions_[id] = std::make_shared<HostedSession>(id, volume, std::make_unique<Session>(pm, sm, cfg));
    return id;
  }

  std::shared_ptr<HostedSession> get(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound("unknown session id: " + id);
    return it->second;
  }

  const Resources& resources() const { return resources_; }

 private:
  template <class T>
  static std::shared_ptr<const T> lookup(const std::map<std::string, std::shared_ptr<const T>>& m,
                                         const std::string& id, const char* what) {
    const auto it = m.find(id);
    if (it == m.end()) throw NotFound(std::string("unknown ") + what + " id: " + id);
    return it->second;
  }

  Resources resources_;
  SessionConfig defaults_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<HostedSession>> sessions_;
  std::uint64_t next_id_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP transport

class HttpService {
 public:
  explicit HttpService(std::shared_ptr<SessionRegistry> registry) : registry_(std::move(registry)) {
    // SO_REUSEADDR only: the library default (SO_REUSEPORT) lets a second
    // server silently share a busy port.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    routes();
  }
  ~HttpService() { stop(); }

  /// Binds the port (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
    return bound;
  }

  void listen() { server_.listen_after_bind(); }

  void start_background() {
    thread_ = std::thread([this] { listen(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void send(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  template <class Fn>
  auto guarded(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      std::shared_ptr<HostedSession> hosted;
      auto fail = [&](int status, const std::string& what) {
        nlohmann::json msg = hosted ? hosted->error_message(what)
                                    : nlohmann::json{{"type", "error"}, {"payload", {{"message", what}}}};
        send(res, msg, status);
      };
      try {
        if (req.path_params.contains("id")) hosted = registry_->get(req.path_params.at("id"));
        fn(req, res, hosted);
      } catch (const NotFound& e) {
        fail(404, e.what());
      } catch (const Conflict& e) {
        fail(409, e.what());
      } catch (const InvalidArgument& e) {
        fail(400, e.what());
      } catch (const nlohmann::json::exception& e) {
        fail(400, e.what());
      } catch (const std::exception& e) {
        fail(500, e.what());
      }
    };
  }

  static int int_param(const httplib::Request& req, const char* key) {
    if (!req.has_param(key)) throw InvalidArgument(std::string("missing query parameter: ") + key);
    try {
      std::size_t pos = 0;
      const std::string s = req.get_param_value(key);
      const int v = std::stoi(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::logic_error&) {
      throw InvalidArgument(std::string("query parameter is not an integer: ") + key);
    }
  }

  void routes() {
    using Hosted = std::shared_ptr<HostedSession>;
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send(res, {{"status", "ok"}}); });

    server_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res, Hosted) {
      const auto body = nlohmann::json::parse(req.body);
      const std::string id = registry_->create(body.at("volume").get<std::string>(), body.at("map").get<std::string>(),
                                               body.at("model").get<std::string>(),
                                               body.value("config", nlohmann::json::object()));
      const auto hosted = registry_->get(id);
      const Dims d = hosted->dims();
      send(res, {{"type", "created"}, {"session", id}, {"seq", 0}, {"payload", {{"dims", {d.nx, d.ny, d.nz}}}}}, 201);
    }));

    server_.Get("/sessions/:id/question", guarded([](const httplib::Request&, httplib::Response& res, Hosted h) {
      send(res, h->question());
    }));

    server_.Post("/sessions/:id/answer", guarded([](const httplib::Request& req, httplib::Response& res, Hosted h) {
      const auto body = nlohmann::json::parse(req.body);
      const auto& label = body.at("label");
      if (!label.is_number_integer()) throw InvalidArgument("label must be the integer 0 or 1");
      send(res, h->answer(label.get<int>()));
    }));

    server_.Get("/sessions/:id/overlay", guarded([](const httplib::Request& req, httplib::Response& res, Hosted h) {
      send(res, h->overlay(int_param(req, "axis"), int_param(req, "slice")));
    }));

    server_.Get("/sessions/:id/final", guarded([](const httplib::Request&, httplib::Response& res, Hosted h) {
      send(res, h->final_result());
    }));

    server_.Get("/sessions/:id/telemetry", guarded([](const httplib::Request&, httplib::Response& res, Hosted h) {
      send(res, h->telemetry());
    }));

    server_.Get("/sessions/:id/events", guarded([](const httplib::Request& req, httplib::Response& res, Hosted h) {
      const std::uint64_t after = req.has_param("after") ? std::stoull(req.get_param_value("after")) : 0;
      const int wait_ms = req.has_param("wait_ms") ? std::clamp(int_param(req, "wait_ms"), 0, 30000) : 0;
      send(res, {{"session", h->id()}, {"messages", h->events(after, std::chrono::milliseconds(wait_ms))}});
    }));
  }

  std::shared_ptr<SessionRegistry> registry_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace hfseg
