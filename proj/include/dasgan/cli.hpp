#pragma once

// Entry point of the `dasgan` binary: subcommands synth, ck-segment, train,
// predict, score and evaluate.
//
// Exit codes: 0 success, 1 domain error, 2 usage error. Failures print one
// line on stderr: error: kind=<kind> message="<text>".

namespace dasgan::cli {

/// Environment variable naming the directory used when --out is omitted.
inline constexpr const char* kOutRootEnv = "DASGAN_OUT_ROOT";

int dispatch(int argc, char** argv);

}  // namespace dasgan::cli
