#pragma once

// Command-line front end: validate, schedule, analyze, simulate and sweep.
// Output files land in --out under fixed names (schedule.csv, sweep.csv,
// events.csv, report.txt).

#include <ostream>
#include <string>
#include <vector>

namespace dagmesh::cli {

/// Runs one command line. Returns 0 iff no error diagnostic was emitted.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dagmesh::cli
