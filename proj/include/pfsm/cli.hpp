#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "pfsm/config.hpp"
#include "pfsm/metrics.hpp"

namespace pfsm {

// Schema tags written into every artifact so readers can reject files from
// a different layout.
inline constexpr const char* kResultsCsvSchema = "pfsm-results-v1";
inline constexpr const char* kRoundLogSchema = "pfsm-round-v1";

struct CsvRow {
  std::string preset;
  EvalResult result;
  std::uint64_t payload_up_bytes = 0;
};

std::string results_csv_header();
std::string results_csv_line(const CsvRow& row);
CsvRow parse_results_csv_line(const std::string& line);

// Number of worker threads from PFSM_THREADS; unset, 0 or 1 mean serial.
int threads_from_env();

// Each command returns a process exit code and reports progress on `log`.
// On failure the partially written artifacts are removed before the error
// propagates.
int cmd_run(const ExperimentConfig& cfg, int threads, std::ostream& log);
int cmd_ablate(const ExperimentConfig& cfg, int threads, std::ostream& log);
int cmd_gradcheck(std::ostream& log);
int cmd_gendata(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log);
int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const ExperimentConfig& cfg, std::ostream& log);

}  // namespace pfsm
