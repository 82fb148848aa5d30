#pragma once

// Command-line front end. Lives in a library so tests can drive it in-process.
//
//   murag gen-data | pretrain | finetune | index | answer | eval
//
// Exit codes: 0 ok, 1 usage, 2 data or config error, 3 numeric failure.

#include <iosfwd>
#include <string>
#include <vector>

namespace murag::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace murag::cli
