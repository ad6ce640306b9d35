#pragma once

// Final-answer extraction and the binary exact-match reward.

#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace retro {

struct GroundTruth {
    std::string raw;
    std::string normalized;

    static GroundTruth from_raw(std::string_view raw);
};

struct Reward {
    int value = 0;

    static Reward correct() { return Reward{1}; }
    static Reward incorrect() { return Reward{0}; }
    explicit operator bool() const { return value == 1; }
    friend bool operator==(const Reward&, const Reward&) = default;
};

/// Rewrites an answer string into canonical form. Applied until it reaches a
/// fixed point, so normalize(normalize(x)) == normalize(x).
std::string normalize_answer(std::string_view answer);

/// Contents of the last \boxed{...} in `text`, normalized. Absent when there
/// is no boxed expression or its braces do not balance.
std::optional<std::string> extract_answer(std::string_view solution_text);

/// All balanced \boxed{...} contents in order, unnormalized.
std::vector<std::string> boxed_contents(std::string_view text);

/// 1 iff `predicted` is present and equals `truth` as a normalized string or
/// as an exact rational.
Reward reward(const std::optional<std::string>& predicted, const GroundTruth& truth);

class Verifier {
public:
    virtual ~Verifier() = default;
    virtual Reward score(const std::optional<std::string>& predicted,
                         const GroundTruth& truth) const = 0;
};

class ExactMatchVerifier final : public Verifier {
public:
    Reward score(const std::optional<std::string>& predicted,
                 const GroundTruth& truth) const override {
        return reward(predicted, truth);
    }
};

/// Runs a user command per comparison. stdin gets the predicted answer on
/// line 1 and the truth on line 2; exit 0 means reward 1, exit 1 reward 0,
/// anything else is an error.
class CommandVerifier final : public Verifier {
public:
    explicit CommandVerifier(std::string command) : command_(std::move(command)) {}

    Reward score(const std::optional<std::string>& predicted,
                 const GroundTruth& truth) const override;

private:
    std::string command_;
    mutable std::mutex mutex_;
};

const Verifier& default_verifier();

}  // namespace retro
