#include "mtend/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <fstream>
#include <mutex>
#include <regex>
#include <thread>

#include <httplib.h>

namespace mtend {

using json = nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(ProfileKind kind) { return kind == ProfileKind::Scan ? "scan" : "grasp"; }

std::optional<ProfileKind> profile_kind_from_string(const std::string& s) {
  if (s == "scan") return ProfileKind::Scan;
  if (s == "grasp") return ProfileKind::Grasp;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Profile repository

namespace {

/// Parses a profile body, prefixing error messages with `path`.
std::variant<ScanProfile, GraspProfile> parse_profile(ProfileKind kind, const json& body, const std::string& path) {
  try {
    if (kind == ProfileKind::Scan) return scan_profile_from_json(body);
    return grasp_profile_from_json(body);
  } catch (const Error& e) {
    throw Error(e.code() == ErrorCode::Parse ? ErrorCode::Parse : ErrorCode::Validation, path + e.what());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, path + e.what());
  }
}

json profile_json(const std::variant<ScanProfile, GraspProfile>& p) {
  return std::visit([](const auto& x) { return to_json(x); }, p);
}

}  // namespace

ProfileRepository::ProfileRepository(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  for (auto kind : {ProfileKind::Scan, ProfileKind::Grasp}) fs::create_directories(dir_ / to_string(kind), ec);
  load();
}

bool ProfileRepository::valid_name(const std::string& name) {
  static const std::regex pattern("[A-Za-z0-9_-]+");
  return std::regex_match(name, pattern);
}

fs::path ProfileRepository::file_of(ProfileKind kind, const std::string& name) const {
  return dir_ / to_string(kind) / (name + ".json");
}

void ProfileRepository::load() {
  profiles_ = {};
  versions_.clear();
  errors_.clear();
  for (auto kind : {ProfileKind::Scan, ProfileKind::Grasp}) {
    const fs::path sub = dir_ / to_string(kind);
    if (!fs::is_directory(sub)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(sub))
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      try {
        std::ifstream in(file);
        json doc;
        try {
          doc = json::parse(in);
        } catch (const json::exception& e) {
          throw Error(ErrorCode::Parse, e.what());
        }
        if (!doc.is_object() || !doc.contains("profile"))
          throw Error(ErrorCode::Parse, "profile: missing field");
        const auto profile = parse_profile(kind, doc.at("profile"), "profile.");
        const std::string name = std::visit([](const auto& p) { return p.name; }, profile);
        if (name != file.stem().string())
          throw Error(ErrorCode::Validation, "profile.name: '" + name + "' does not match the file name");
        std::uint64_t version = 1;
        if (doc.contains("metadata") && doc["metadata"].contains("version"))
          version = doc["metadata"]["version"].get<std::uint64_t>();
        if (kind == ProfileKind::Scan)
          profiles_.scan[name] = std::get<ScanProfile>(profile);
        else
          profiles_.grasp[name] = std::get<GraspProfile>(profile);
        versions_[{kind, name}] = version;
      } catch (const std::exception& e) {
        errors_.push_back({file, file.filename().string() + ": " + e.what()});
      }
    }
  }
}

std::uint64_t ProfileRepository::version(ProfileKind kind, const std::string& name) const {
  const auto it = versions_.find({kind, name});
  return it == versions_.end() ? 0 : it->second;
}

std::uint64_t ProfileRepository::put(ProfileKind kind, const std::string& name, const json& body) {
  if (!valid_name(name)) throw Error(ErrorCode::Validation, "name: must match [A-Za-z0-9_-]+");
  if (!body.is_object()) throw Error(ErrorCode::Validation, "profile: expected an object");
  json named = body;
  if (!named.contains("name")) named["name"] = name;
  if (named["name"] != name) throw Error(ErrorCode::Validation, "name: does not match the path");
  const auto profile = parse_profile(kind, named, "");
  const std::uint64_t version = this->version(kind, name) + 1;
  const json doc = {{"metadata", {{"name", name}, {"kind", to_string(kind)}, {"version", version}}},
                    {"profile", profile_json(profile)}};
  const fs::path file = file_of(kind, name);
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
    out << doc.dump(2) << '\n';
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot write " + file.string() + ": " + ec.message());
  if (kind == ProfileKind::Scan)
    profiles_.scan[name] = std::get<ScanProfile>(profile);
  else
    profiles_.grasp[name] = std::get<GraspProfile>(profile);
  versions_[{kind, name}] = version;
  return version;
}

std::uint64_t ProfileRepository::put(const ScanProfile& profile) {
  return put(ProfileKind::Scan, profile.name, to_json(profile));
}

std::uint64_t ProfileRepository::put(const GraspProfile& profile) {
  return put(ProfileKind::Grasp, profile.name, to_json(profile));
}

json ProfileRepository::list(ProfileKind kind) const {
  json items = json::object();
  auto add = [&](const std::string& name, json body) {
    items[name] = {{"version", version(kind, name)}, {"profile", std::move(body)}};
  };
  if (kind == ProfileKind::Scan)
    for (const auto& [name, p] : profiles_.scan) add(name, to_json(p));
  else
    for (const auto& [name, p] : profiles_.grasp) add(name, to_json(p));
  json errors = json::array();
  for (const auto& e : errors_)
    if (e.file.parent_path().filename() == to_string(kind)) errors.push_back(e.message);
  return {{"profiles", items}, {"errors", errors}};
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::Parse:
    case ErrorCode::Validation:
    case ErrorCode::OutOfRange: return 400;
    case ErrorCode::UnknownId: return 404;
    default: return 409;
  }
}

// ---------------------------------------------------------------------------
// Gateway

namespace {

json error_body(const std::string& code, const std::string& message) { return {{"code", code}, {"message", message}}; }

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json teleop_result_json(const TeleopResult& r) {
  return {{"ok", r.ok},
          {"reason", r.reason},
          {"applied", {{"v", r.applied.v}, {"omega", r.applied.omega}}},
          {"attached", r.attached}};
}

}  // namespace

struct Gateway::Impl {
  Session& session;
  ProfileRepository& profiles;
  GatewayConfig config;
  httplib::Server server;
  std::thread listener;
  std::thread ticker;
  std::atomic<bool> running{false};
  int bound_port{0};

  struct Connection {
    std::uint64_t next_message{1};
    bool streaming{false};
  };
  mutable std::mutex mutex;
  std::condition_variable stopped;
  std::map<std::uint64_t, Connection> connections;
  std::uint64_t next_connection{1};
  std::optional<std::uint64_t> operator_connection;
  std::vector<json> recorded;
  std::unique_ptr<std::ofstream> request_sink;
  /// Serializes profile writes with the session update that follows them.
  std::mutex profile_mutex;

  Impl(Session& s, ProfileRepository& p, GatewayConfig c) : session(s), profiles(p), config(std::move(c)) {
    if (config.request_log) request_sink = std::make_unique<std::ofstream>(*config.request_log, std::ios::trunc);
    routes();
  }

  std::optional<std::uint64_t> connection_of(const httplib::Request& req) const {
    const std::string h = req.has_header("X-Connection") ? req.get_header_value("X-Connection")
                                                         : req.get_param_value("connection");
    if (h.empty()) return std::nullopt;
    try {
      return std::stoull(h);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  void record(const httplib::Request& req, std::optional<std::uint64_t> conn) {
    json r = {{"connection", conn ? json(*conn) : json(nullptr)},
              {"method", req.method},
              {"path", req.path},
              {"body", req.body}};
    std::lock_guard lock(mutex);
    recorded.push_back(r);
    if (request_sink) *request_sink << r.dump() << '\n' << std::flush;
  }

  void disconnect(std::uint64_t id) {
    std::lock_guard lock(mutex);
    connections.erase(id);
    if (operator_connection == id) operator_connection.reset();
  }

  /// Runs an operator command: role check, body parse, error mapping.
  void command(const httplib::Request& req, httplib::Response& res, const std::function<json(const json&)>& fn) {
    const auto conn = connection_of(req);
    record(req, conn);
    {
      std::lock_guard lock(mutex);
      if (!conn || !connections.count(*conn)) {
        reply(res, 403, error_body("Forbidden", "unknown connection; POST /connect first"));
        return;
      }
      if (operator_connection != conn) {
        reply(res, 403, error_body("Forbidden", "commands require the operator role"));
        return;
      }
    }
    json body = json::object();
    if (!req.body.empty()) {
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        reply(res, 400, error_body(to_string(ErrorCode::Parse), e.what()));
        return;
      }
    }
    try {
      reply(res, 200, fn(body));
    } catch (const Error& e) {
      reply(res, http_status(e.code()), error_body(to_string(e.code()), e.what()));
    } catch (const json::exception& e) {
      reply(res, 400, error_body(to_string(ErrorCode::Validation), e.what()));
    }
  }

  json state_json() {
    json s = to_json(session.snapshot());
    std::lock_guard lock(mutex);
    s["operator"] = operator_connection ? json(*operator_connection) : json(nullptr);
    s["connections"] = connections.size();
    return s;
  }

  static std::uint64_t proposal_id(const httplib::Request& req) { return std::stoull(req.matches[1].str()); }

  void routes() {
    server.Post("/connect", [this](const httplib::Request& req, httplib::Response& res) {
      record(req, std::nullopt);
      std::lock_guard lock(mutex);
      const std::uint64_t id = next_connection++;
      connections[id] = {};
      reply(res, 200, {{"connection", id}});
    });
    server.Post("/disconnect", [this](const httplib::Request& req, httplib::Response& res) {
      const auto conn = connection_of(req);
      record(req, conn);
      if (conn) disconnect(*conn);
      reply(res, 200, json::object());
    });
    server.Post("/operator/acquire", [this](const httplib::Request& req, httplib::Response& res) {
      const auto conn = connection_of(req);
      record(req, conn);
      std::lock_guard lock(mutex);
      if (!conn || !connections.count(*conn)) return reply(res, 403, error_body("Forbidden", "unknown connection"));
      if (operator_connection && operator_connection != conn)
        return reply(res, 409, error_body("RoleHeld", "another connection holds the operator role"));
      operator_connection = conn;
      reply(res, 200, {{"operator", *conn}});
    });
    server.Post("/operator/release", [this](const httplib::Request& req, httplib::Response& res) {
      const auto conn = connection_of(req);
      record(req, conn);
      std::lock_guard lock(mutex);
      if (conn && operator_connection == conn) operator_connection.reset();
      reply(res, 200, json::object());
    });

    server.Get("/state", [this](const httplib::Request&, httplib::Response& res) { reply(res, 200, state_json()); });
    server.Get("/cloud", [this](const httplib::Request&, httplib::Response& res) {
      json c = to_json(session.cloud());
      c["world_version"] = session.world_version();
      reply(res, 200, c);
    });
    server.Get(R"(/proposal/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto p = session.proposal(proposal_id(req));
      if (!p) return reply(res, 404, error_body(to_string(ErrorCode::UnknownId), "unknown proposal"));
      reply(res, 200, to_json(*p, req.get_param_value("frames") != "false"));
    });
    server.Get("/events", [this](const httplib::Request& req, httplib::Response& res) {
      std::size_t since = 0;
      if (req.has_param("since")) {
        try {
          since = std::stoull(req.get_param_value("since"));
        } catch (const std::exception&) {
          return reply(res, 400, error_body(to_string(ErrorCode::Validation), "since: expected a non-negative integer"));
        }
      }
      const auto events = session.events(since);
      reply(res, 200, {{"events", events}, {"next", since + events.size()}});
    });
    server.Get(R"(/profiles/([a-z]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = profile_kind_from_string(req.matches[1].str());
      if (!kind) return reply(res, 404, error_body("UnknownKind", "profile kind must be scan or grasp"));
      std::lock_guard lock(profile_mutex);
      reply(res, 200, profiles.list(*kind));
    });
    server.Get("/stream", [this](const httplib::Request& req, httplib::Response& res) { stream(req, res); });

    server.Post("/task", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [this](const json& body) {
        session.submit_task(task_goal_from_json(body));
        return state_json();
      });
    });
    server.Post(R"(/proposal/(\d+)/approve)", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [&](const json&) {
        session.approve(proposal_id(req));
        return state_json();
      });
    });
    server.Post(R"(/proposal/(\d+)/reject)", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [&](const json&) {
        session.reject(proposal_id(req));
        return state_json();
      });
    });
    server.Post(R"(/proposal/(\d+)/hint)", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [&](const json& body) {
        session.refine_with_hint(proposal_id(req), hint_from_json(body));
        return state_json();
      });
    });
    server.Post("/teleop/enter", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [this](const json&) {
        session.enter_teleop();
        return state_json();
      });
    });
    server.Post("/teleop/exit", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [this](const json&) {
        session.exit_teleop();
        return state_json();
      });
    });
    server.Post("/teleop/cmd", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res,
              [this](const json& body) { return teleop_result_json(session.teleop_cmd(teleop_command_from_json(body))); });
    });
    server.Post("/estop", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [this](const json&) {
        session.emergency_stop();
        return state_json();
      });
    });
    server.Post("/enable", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [this](const json&) {
        session.enable();
        return state_json();
      });
    });
    server.Put(R"(/profiles/([a-z]+)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [&](const json& body) -> json {
        const auto kind = profile_kind_from_string(req.matches[1].str());
        if (!kind) throw Error(ErrorCode::Validation, "kind: must be scan or grasp");
        const std::string name = req.matches[2].str();
        std::lock_guard lock(profile_mutex);
        const std::uint64_t version = profiles.put(*kind, name, body);
        session.set_profiles(profiles.profiles());
        return {{"name", name}, {"kind", to_string(*kind)}, {"version", version}};
      });
    });
    server.Post("/sim/step", [this](const httplib::Request& req, httplib::Response& res) {
      command(req, res, [this](const json& body) -> json {
        if (config.realtime) throw Error(ErrorCode::Validation, "simulation runs in real time");
        const long ticks = body.value("ticks", 1L);
        if (ticks < 1 || ticks > 1000000) throw Error(ErrorCode::Validation, "ticks: must lie in [1, 1e6]");
        for (long i = 0; i < ticks; ++i) session.tick();
        return state_json();
      });
    });

    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404)
        reply(res, 404, error_body("UnknownKind", "no endpoint " + req.method + " " + req.path));
      else
        reply(res, res.status, error_body("Http", "request failed"));
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      reply(res, 500, error_body("Internal", what));
    });
  }

  void stream(const httplib::Request& req, httplib::Response& res) {
    const auto conn = connection_of(req);
    {
      std::lock_guard lock(mutex);
      if (!conn || !connections.count(*conn)) return reply(res, 403, error_body("Forbidden", "unknown connection"));
      connections[*conn].streaming = true;
    }
    const std::uint64_t id = *conn;
    auto cursor = std::make_shared<std::size_t>(session.event_count());
    const auto period = std::chrono::duration<double>(1.0 / std::max(config.telemetry_hz, 0.1));
    res.set_chunked_content_provider(
        "application/x-ndjson",
        [this, id, cursor, period](std::size_t, httplib::DataSink& sink) {
          {
            std::unique_lock lock(mutex);
            stopped.wait_for(lock, period, [&] { return !running.load() || !connections.count(id); });
            if (!running.load() || !connections.count(id)) {
              sink.done();
              return true;
            }
          }
          std::vector<json> messages;
          for (auto& e : session.events(*cursor)) {
            ++*cursor;
            messages.push_back({{"kind", "event"}, {"payload", std::move(e)}});
          }
          json telemetry = session.telemetry();
          telemetry["mode"] = to_string(session.mode());
          messages.push_back({{"kind", "telemetry"}, {"payload", std::move(telemetry)}});
          std::string out;
          {
            std::lock_guard lock(mutex);
            auto it = connections.find(id);
            if (it == connections.end()) return false;
            for (auto& m : messages) {
              m["id"] = it->second.next_message++;
              out += m.dump() + "\n";
            }
          }
          return sink.write(out.data(), out.size());
        },
        [this, id](bool) { disconnect(id); });
  }
};

Gateway::Gateway(Session& session, ProfileRepository& profiles, GatewayConfig config)
    : impl_(std::make_unique<Impl>(session, profiles, std::move(config))) {}

Gateway::~Gateway() { stop(); }

int Gateway::start() {
  Impl& g = *impl_;
  if (g.running.load()) return g.bound_port;
  if (g.config.port == 0) {
    g.bound_port = g.server.bind_to_any_port(g.config.host);
    if (g.bound_port < 0) throw Error(ErrorCode::Io, "cannot bind " + g.config.host);
  } else {
    if (!g.server.bind_to_port(g.config.host, g.config.port))
      throw Error(ErrorCode::Io, "cannot bind " + g.config.host + ":" + std::to_string(g.config.port));
    g.bound_port = g.config.port;
  }
  g.running = true;
  g.listener = std::thread([&g] { g.server.listen_after_bind(); });
  if (g.config.realtime)
    g.ticker = std::thread([&g] {
      auto next = std::chrono::steady_clock::now();
      while (g.running.load()) {
        g.session.tick();
        next += std::chrono::microseconds(static_cast<long>(kFrameDt * 1e6));
        std::unique_lock lock(g.mutex);
        g.stopped.wait_until(lock, next, [&] { return !g.running.load(); });
      }
    });
  g.server.wait_until_ready();
  return g.bound_port;
}

void Gateway::wait() {
  std::unique_lock lock(impl_->mutex);
  impl_->stopped.wait(lock, [&] { return !impl_->running.load(); });
}

void Gateway::stop() {
  Impl& g = *impl_;
  {
    std::lock_guard lock(g.mutex);
    if (!g.running.exchange(false)) return;
  }
  g.stopped.notify_all();
  g.server.stop();
  if (g.listener.joinable()) g.listener.join();
  if (g.ticker.joinable()) g.ticker.join();
}

int Gateway::port() const { return impl_->bound_port; }

std::vector<json> Gateway::recorded_requests() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->recorded;
}

std::vector<int> replay_requests(const std::vector<json>& requests, const std::string& host, int port) {
  httplib::Client client(host, port);
  client.set_read_timeout(600, 0);
  std::vector<int> statuses;
  for (const auto& r : requests) {
    httplib::Headers headers;
    if (!r["connection"].is_null()) headers.emplace("X-Connection", std::to_string(r["connection"].get<std::uint64_t>()));
    const std::string method = r["method"], path = r["path"], body = r["body"];
    httplib::Result res = method == "PUT" ? client.Put(path, headers, body, "application/json")
                                          : client.Post(path, headers, body, "application/json");
    statuses.push_back(res ? res->status : -1);
  }
  return statuses;
}

// ---------------------------------------------------------------------------
// Headless runs

std::vector<TaskGoal> load_task_script(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
  }
  const json& tasks = doc.is_array() ? doc : doc.value("tasks", json::array());
  if (!tasks.is_array() || tasks.empty()) throw Error(ErrorCode::Validation, "tasks: expected a non-empty array");
  std::vector<TaskGoal> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    try {
      out.push_back(task_goal_from_json(tasks[i]));
    } catch (const Error& e) {
      throw Error(e.code(), "tasks[" + std::to_string(i) + "]." + e.what(), i);
    }
  }
  return out;
}

HeadlessResult run_headless(const Scenario& scenario, const ProfileSet& profiles, const std::vector<TaskGoal>& tasks,
                            const HeadlessOptions& options) {
  SessionConfig cfg;
  cfg.seed = options.seed;
  cfg.event_log_path = options.event_log;
  PlannerConfig planner_config;
  planner_config.seed = options.seed;
  Session session(scenario, profiles, std::make_shared<ScenarioPlanner>(planner_config), cfg);
  const OccupancyGrid grid = rasterize_scene(scenario.scene, cfg.grid_resolution, cfg.inflation_radius);
  HeadlessResult result;
  auto fail = [&](std::string message) {
    result.ok = false;
    result.message = std::move(message);
    result.events = session.events();
    result.cloud = session.cloud();
    return result;
  };
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string label = "task " + std::to_string(i) + " (" + to_json(tasks[i]).value("kind", "") + ")";
    try {
      session.submit_task(tasks[i]);
    } catch (const Error& e) {
      return fail(label + ": " + to_string(e.code()) + ": " + e.what());
    }
    const SessionSnapshot snap = session.snapshot();
    if (snap.mode != Mode::Proposed || !snap.active_proposal)
      return fail(label + ": planning failed: " + (snap.last_error ? snap.last_error->dump() : "no proposal"));
    const PlanProposal proposal = *session.proposal(*snap.active_proposal);
    if (!(proposal.risk.score < options.auto_approve_below)) {
      session.reject(proposal.id);
      return fail(label + ": risk " + std::to_string(proposal.risk.score) + " not below auto-approve threshold " +
                  std::to_string(options.auto_approve_below));
    }
    session.approve(proposal.id);
    std::size_t ticks = 0;
    while (session.mode() == Mode::Executing && ticks++ < options.max_ticks) session.tick();
    if (session.mode() != Mode::Done) {
      const auto events = session.events();
      return fail(label + ": execution ended in " + to_string(session.mode()) + " after event '" +
                  events.back().value("event", "") + "'");
    }
    // Against the cloud the plan was made on and the one the run produced.
    if (const auto bad = verify_sweeps(proposal, proposal.cloud, grid, session.scenario().robot, scenario.arm))
      return fail(label + ": sweep check failed at " + *bad);
    if (const auto bad = verify_sweeps(proposal, session.cloud(), grid, session.scenario().robot, scenario.arm))
      return fail(label + ": sweep check against the executed scan failed at " + *bad);
    result.executed.push_back(*session.proposal(proposal.id));
  }
  result.events = session.events();
  result.cloud = session.cloud();
  result.ok = !result.events.empty() && result.events.back().value("mode_after", "") == "DONE";
  result.message = result.ok ? "all tasks done" : "event log does not end in DONE";
  return result;
}

}  // namespace mtend
