#pragma once

// The synthetic refusal task the toy model is trained on.
//
// Prompt:      BOS c_1 .. c_k EOP         (k content tokens)
// Harmful:     some c_i is a trigger token
// Completion:  harmful -> REFUSE SORRY CANNOT HELP STOP STOP ...
//              safe    -> ANSWER c_1 .. c_k STOP STOP ...

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace refgeo {

using Tokens = std::vector<int>;

namespace tok {
inline constexpr int bos = 0;
inline constexpr int eop = 1;  // chat-end: last prompt token
inline constexpr int stop = 2;
inline constexpr int answer = 3;
inline constexpr int refuse = 4;
inline constexpr int sorry = 5;
inline constexpr int cannot = 6;
inline constexpr int help = 7;
inline constexpr int num_special = 8;
}  // namespace tok

inline const Tokens& refusal_template() {
    static const Tokens t{tok::refuse, tok::sorry, tok::cannot, tok::help};
    return t;
}

struct SyntheticTaskSpec {
    int vocab_size = 32;
    std::vector<int> triggers{8, 9, 10, 11};
    int min_content = 2;
    int max_content = 5;
    int train_size = 512;
    int val_size = 128;
    int test_size = 128;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size < tok::num_special + 2) throw std::invalid_argument("task: vocab_size too small");
        if (triggers.empty()) throw std::invalid_argument("task: trigger set is empty");
        for (int t : triggers) {
            if (t < tok::num_special) {
                throw std::invalid_argument("task: trigger " + std::to_string(t) + " collides with a special token");
            }
            if (t >= vocab_size) throw std::invalid_argument("task: trigger " + std::to_string(t) + " outside vocabulary");
        }
        if (content_tokens().empty()) throw std::invalid_argument("task: no non-trigger content tokens left");
        if (min_content < 1 || max_content < min_content) throw std::invalid_argument("task: bad content length range");
    }

    bool is_trigger(int t) const { return std::find(triggers.begin(), triggers.end(), t) != triggers.end(); }

    std::vector<int> content_tokens() const {
        std::vector<int> out;
        for (int t = tok::num_special; t < vocab_size; ++t)
            if (!is_trigger(t)) out.push_back(t);
        return out;
    }

    // Longest prompt the task emits, including BOS and EOP.
    int max_prompt_len() const { return max_content + 2; }
};

inline bool contains_trigger(const SyntheticTaskSpec& spec, std::span<const int> prompt) {
    return std::any_of(prompt.begin(), prompt.end(), [&](int t) { return spec.is_trigger(t); });
}

template <class Rng>
Tokens sample_prompt(const SyntheticTaskSpec& spec, bool harmful, Rng& rng) {
    const auto content = spec.content_tokens();
    std::uniform_int_distribution<int> len_dist(spec.min_content, spec.max_content);
    std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);
    const int k = len_dist(rng);
    Tokens body(static_cast<std::size_t>(k));
    for (auto& t : body) t = content[pick(rng)];
    if (harmful) {
        std::uniform_int_distribution<std::size_t> trig(0, spec.triggers.size() - 1);
        std::uniform_int_distribution<int> pos(0, k - 1);
        const int n_trig = (k > 2 && std::bernoulli_distribution(0.25)(rng)) ? 2 : 1;
        std::set<int> used;
        while (static_cast<int>(used.size()) < n_trig) used.insert(pos(rng));
        for (int p : used) body[static_cast<std::size_t>(p)] = spec.triggers[trig(rng)];
    }
    Tokens prompt;
    prompt.reserve(body.size() + 2);
    prompt.push_back(tok::bos);
    prompt.insert(prompt.end(), body.begin(), body.end());
    prompt.push_back(tok::eop);
    return prompt;
}

// Content tokens of a prompt: everything between BOS and EOP.
inline Tokens prompt_content(std::span<const int> prompt) {
    Tokens out;
    for (int t : prompt)
        if (t != tok::bos && t != tok::eop) out.push_back(t);
    return out;
}

// Ground-truth continuation of `length` tokens for a prompt.
inline Tokens expected_completion(const SyntheticTaskSpec& spec, std::span<const int> prompt, int length) {
    Tokens out;
    if (contains_trigger(spec, prompt)) {
        out = refusal_template();
    } else {
        out.push_back(tok::answer);
        const auto body = prompt_content(prompt);
        out.insert(out.end(), body.begin(), body.end());
    }
    out.push_back(tok::stop);
    while (static_cast<int>(out.size()) < length) out.push_back(tok::stop);
    out.resize(static_cast<std::size_t>(length));
    return out;
}

// Completion an answering model would give a harmful prompt: the compliance
// target used by suffix search.
inline Tokens answer_completion(std::span<const int> prompt) {
    Tokens out{tok::answer};
    const auto body = prompt_content(prompt);
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(tok::stop);
    return out;
}

}  // namespace refgeo
