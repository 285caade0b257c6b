#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "hadapt/config.hpp"
#include "hadapt/trainer.hpp"

namespace hadapt::cli {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

/// Entry point shared by the binary and in-process callers; `args` excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

nlohmann::json report_json(const RunReport& report);

/// Writes report.json, metrics.csv and timing.json into `dir`.
void write_run_files(const RunReport& report, double wall_time_s, const std::filesystem::path& dir);

/// Percentage with three decimals, e.g. "0.034%".
std::string format_fraction(double fraction);

}  // namespace hadapt::cli
