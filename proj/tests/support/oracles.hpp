#pragma once

// Straightforward re-derivations used to check the library. They favour the
// most literal reading of each rule over speed and share no code with it.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace oracle {

using Track = std::vector<std::uint8_t>;

/// State index from raw frames: a bin bit is set when more than half of its
/// frames are voiced; bins end at 10, 30, 60 and 100 frames.
int recount_state(const Track& s0, const Track& s1);

/// Per-speaker bin marginals by summing over all 256 states.
std::array<std::array<double, 4>, 2> state_marginals(const std::array<double, 256>& p);

/// Two-way softmax of the marginal sums over bins [b0, b1).
std::array<double, 2> projected(const std::array<double, 256>& p, int b0, int b1);

/// Mean cross entropy of integer targets under row logits.
double cross_entropy(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets);

/// Per-frame BCE summed over both speakers, averaged over frames.
double binary_cross_entropy(const std::vector<std::array<double, 2>>& probs, const std::vector<std::array<int, 2>>& y);

/// Mean per-class recall over classes that occur in `truth`.
double balanced_accuracy(const std::vector<int>& truth, const std::vector<int>& pred);

struct TurnSample {
  std::size_t decision_frame;
  bool shift;
  int prev, next;
  bool operator==(const TurnSample&) const = default;
};

/// Shift/hold samples found by building each speaker's bridged utterances
/// first and then testing every mutual silence against them.
std::vector<TurnSample> shift_hold(const Track& s0, const Track& s1, int min_silence_frames_exclusive = 12,
                                   int min_utterance_frames = 50, int bridge_below = 13, int decision_offset = 2);

/// Random traces with run lengths that straddle the extraction thresholds.
void random_trace(std::uint64_t seed, std::size_t n, Track& s0, Track& s1);

}  // namespace oracle
