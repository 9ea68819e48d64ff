#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/error.hpp"
#include "mtend/supervisor.hpp"

namespace mtend {

enum class ProfileKind { Scan, Grasp };

const char* to_string(ProfileKind kind);
std::optional<ProfileKind> profile_kind_from_string(const std::string& s);

struct ProfileLoadError {
  std::filesystem::path file;
  std::string message;
};

/// Scan and grasp profiles stored one JSON file per profile under
/// `<dir>/scan/<name>.json` and `<dir>/grasp/<name>.json`. A file holds
/// `{metadata: {name, kind, version}, profile: {...}}`.
class ProfileRepository {
 public:
  /// Creates the directories when missing and loads every file.
  explicit ProfileRepository(std::filesystem::path dir);

  /// Re-reads every file. Files that fail to parse or validate are skipped
  /// and reported in load_errors(); the rest still load.
  void load();

  const ProfileSet& profiles() const { return profiles_; }
  const std::vector<ProfileLoadError>& load_errors() const { return errors_; }
  /// Metadata version of a stored profile; 0 when absent.
  std::uint64_t version(ProfileKind kind, const std::string& name) const;
  const std::filesystem::path& directory() const { return dir_; }

  /// Validates and writes the profile under `name`, bumping the version
  /// when it already exists. Returns the new version. Throws Validation
  /// with the offending field path, or Io.
  std::uint64_t put(ProfileKind kind, const std::string& name, const nlohmann::json& profile);
  std::uint64_t put(const ScanProfile& profile);
  std::uint64_t put(const GraspProfile& profile);

  nlohmann::json list(ProfileKind kind) const;

  /// Profile names are restricted to [A-Za-z0-9_-]+.
  static bool valid_name(const std::string& name);

 private:
  std::filesystem::path file_of(ProfileKind kind, const std::string& name) const;

  std::filesystem::path dir_;
  ProfileSet profiles_;
  std::map<std::pair<ProfileKind, std::string>, std::uint64_t> versions_;
  std::vector<ProfileLoadError> errors_;
};

/// HTTP status for a library error: validation 400, unknown id 404,
/// supervisor refusals 409.
int http_status(ErrorCode code);

struct GatewayConfig {
  std::string host{"127.0.0.1"};
  /// 0 binds an ephemeral port.
  int port{0};
  /// Tick the session at 50 Hz wall clock. Otherwise time only advances
  /// through `POST /sim/step`, which makes runs reproducible.
  bool realtime{true};
  double telemetry_hz{10.0};
  /// Also append every recorded request to this JSON-lines file.
  std::optional<std::filesystem::path> request_log;
};

/// HTTP front end of one session. Connections register with `POST /connect`
/// and identify themselves with the `X-Connection` header; one connection at
/// a time may hold the operator role, and only it may send commands.
/// `GET /stream` pushes JSON-lines envelopes `{id, kind, payload}` with kind
/// "telemetry" or "event"; closing it disconnects and releases the role.
class Gateway {
 public:
  Gateway(Session& session, ProfileRepository& profiles, GatewayConfig config = {});
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Binds and serves on background threads. Returns the bound port; throws
  /// Io when binding fails.
  int start();
  /// Blocks until stop() is called from another thread.
  void wait();
  void stop();
  int port() const;

  /// State-changing requests received so far, as `{connection, method,
  /// path, body}`, in arrival order.
  std::vector<nlohmann::json> recorded_requests() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Sends recorded requests to a gateway in order. Returns the HTTP statuses.
std::vector<int> replay_requests(const std::vector<nlohmann::json>& requests, const std::string& host, int port);

/// `{tasks: [task, ...]}` or a bare array of tasks.
std::vector<TaskGoal> load_task_script(const std::filesystem::path& path);

struct HeadlessOptions {
  double auto_approve_below{1.0};
  std::uint64_t seed{1};
  std::optional<std::filesystem::path> event_log;
  /// Per-task execution budget in ticks.
  std::size_t max_ticks{100000};
};

struct HeadlessResult {
  bool ok{false};
  std::string message;
  std::vector<nlohmann::json> events;
  /// Proposals that ran to completion, in order.
  std::vector<PlanProposal> executed;
  /// Cloud fused during the run, world frame.
  UncertainPointCloud cloud;
};

/// Runs the tasks in order: submit, auto-approve when the risk score is
/// below the threshold (otherwise reject and stop), execute to completion,
/// then re-check every arm trajectory with verify_sweeps against both the
/// planning cloud and the cloud fused during execution. ok when every task
/// reached DONE and every sweep is clean.
HeadlessResult run_headless(const Scenario& scenario, const ProfileSet& profiles, const std::vector<TaskGoal>& tasks,
                            const HeadlessOptions& options = {});

}  // namespace mtend
