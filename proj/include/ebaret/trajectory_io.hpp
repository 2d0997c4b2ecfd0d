#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ebaret/trajectory.hpp"

namespace ebaret::io {

// JSONL record: campaign_id, seed, period, source, policy, constraints,
// states[T][8], actions[T], rewards[T], spends[T], values[T], plus
// sigma_score / expert_level / rewards_redistributed / rtg once prepared.
nlohmann::json to_json(const Trajectory& traj);
Trajectory from_json(const nlohmann::json& j);

std::string to_line(const Trajectory& traj);

void write_jsonl(const std::filesystem::path& path, std::span<const Trajectory> trajectories);
std::vector<Trajectory> read_jsonl(const std::filesystem::path& path);

// Writes to a sibling temp file then renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace ebaret::io
