#include "ebaret/trajectory_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "ebaret/errors.hpp"

namespace ebaret::io {

using nlohmann::json;

json to_json(const Trajectory& traj) {
  json j;
  j["campaign_id"] = traj.campaign_id;
  j["seed"] = traj.seed;
  j["period"] = traj.period;
  j["source"] = traj.source;
  j["policy"] = traj.policy;
  j["constraints"] = {{"budget", traj.constraints.budget},
                      {"ros_bound", traj.constraints.ros_bound}};
  j["states"] = traj.states;
  j["actions"] = traj.actions;
  j["rewards"] = traj.rewards;
  j["spends"] = traj.spends;
  j["values"] = traj.values;
  if (!traj.conversions.empty()) j["conversions"] = traj.conversions;
  if (!traj.sigma_scores.empty()) j["sigma_score"] = traj.sigma_scores;
  if (!traj.expert_levels.empty()) j["expert_level"] = traj.expert_levels;
  if (!traj.rewards_redistributed.empty()) {
    j["rewards_redistributed"] = traj.rewards_redistributed;
  }
  if (!traj.rtg.empty()) j["rtg"] = traj.rtg;
  return j;
}

Trajectory from_json(const json& j) {
  Trajectory t;
  try {
    t.campaign_id = j.at("campaign_id").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.period = j.value("period", -1);
    t.source = j.value("source", std::string("behavior"));
    t.policy = j.value("policy", std::string());
    t.constraints.budget = j.at("constraints").at("budget").get<double>();
    t.constraints.ros_bound = j.at("constraints").at("ros_bound").get<double>();
    t.states = j.at("states").get<std::vector<StateVector>>();
    t.actions = j.at("actions").get<std::vector<double>>();
    t.rewards = j.at("rewards").get<std::vector<double>>();
    t.spends = j.at("spends").get<std::vector<double>>();
    if (j.contains("values")) t.values = j.at("values").get<std::vector<double>>();
    if (j.contains("conversions")) t.conversions = j.at("conversions").get<std::vector<int>>();
    if (j.contains("sigma_score")) t.sigma_scores = j.at("sigma_score").get<std::vector<double>>();
    if (j.contains("expert_level")) t.expert_levels = j.at("expert_level").get<std::vector<int>>();
    if (j.contains("rewards_redistributed")) {
      t.rewards_redistributed = j.at("rewards_redistributed").get<std::vector<double>>();
    }
    if (j.contains("rtg")) t.rtg = j.at("rtg").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("trajectory record: ") + e.what());
  }
  const std::size_t n = t.actions.size();
  if (t.states.size() != n || t.rewards.size() != n || t.spends.size() != n ||
      (!t.values.empty() && t.values.size() != n) ||
      (!t.conversions.empty() && t.conversions.size() != n)) {
    throw SchemaError("trajectory record: per-step arrays have different lengths");
  }
  return t;
}

std::string to_line(const Trajectory& traj) { return to_json(traj).dump(); }

void write_jsonl(const std::filesystem::path& path, std::span<const Trajectory> trajectories) {
  std::string out;
  for (const Trajectory& t : trajectories) {
    out += to_line(t);
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<Trajectory> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Trajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(from_json(json::parse(line)));
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace ebaret::io
