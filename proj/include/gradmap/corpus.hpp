#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gradmap/checkpoint.hpp"
#include "gradmap/model.hpp"

namespace gradmap {

// Byte-level tokenizer: ids 0..255 are raw bytes, 256 is BOS.
inline constexpr Token kBosToken = 256;
inline constexpr std::size_t kByteVocab = 257;

inline std::vector<Token> tokenize(std::string_view text, bool with_bos = true) {
    std::vector<Token> out;
    out.reserve(text.size() + 1);
    if (with_bos) out.push_back(kBosToken);
    for (unsigned char ch : text) out.push_back(ch);
    return out;
}

inline std::string detokenize(const std::vector<Token>& tokens) {
    std::string s;
    for (Token t : tokens) {
        if (t < 256) s.push_back(static_cast<char>(t));
    }
    return s;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

/// 64-bit FNV-1a, used to fingerprint corpora in run reports.
inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Deterministic English-like text with learnable regularities: fixed
/// noun/attribute facts restated across sentences, counting runs, small sums
/// and quoted echoes. Used as the bundled desk corpus.
inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
    static constexpr std::array<std::string_view, 16> nouns = {
        "cat", "dog", "river", "house", "garden", "teacher", "ship", "forest",
        "bird", "lamp", "king", "window", "horse", "village", "storm", "letter"};
    static constexpr std::array<std::string_view, 8> colors = {
        "red", "blue", "green", "white", "black", "yellow", "grey", "brown"};
    static constexpr std::array<std::string_view, 8> places = {
        "hill", "market", "harbor", "valley", "tower", "bridge", "field", "road"};
    static constexpr std::array<std::string_view, 10> verbs = {
        "sees", "follows", "finds", "likes", "watches", "hears", "calls", "helps", "meets", "knows"};
    static constexpr std::array<std::string_view, 8> names = {
        "anna", "boris", "clara", "david", "elena", "felix", "greta", "hugo"};
    static constexpr std::array<std::string_view, 10> numbers = {
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};

    std::mt19937_64 rng(seed);
    auto pick = [&](std::size_t n) {
        return static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    };
    // Facts are fixed across seeds so every corpus shares them.
    auto color_of = [](std::size_t noun) { return colors[(noun * 5 + 3) % colors.size()]; };
    auto place_of = [](std::size_t noun) { return places[(noun * 3 + 1) % places.size()]; };

    std::string out;
    out.reserve(bytes + 128);
    while (out.size() < bytes) {
        const std::size_t kind = pick(7);
        const std::size_t a = pick(nouns.size());
        const std::size_t b = pick(nouns.size());
        std::string s;
        switch (kind) {
        case 0:
            s = "the " + std::string(color_of(a)) + " " + std::string(nouns[a]) + " " +
                std::string(verbs[pick(verbs.size())]) + " the " + std::string(nouns[b]) + ".";
            break;
        case 1:
            s = "the " + std::string(nouns[a]) + " lives near the " + std::string(place_of(a)) +
                ", and the " + std::string(nouns[a]) + " is " + std::string(color_of(a)) + ".";
            break;
        case 2: {
            const std::size_t start = pick(6);
            const std::size_t len = 3 + pick(4);
            for (std::size_t i = 0; i < len && start + i < numbers.size(); ++i) {
                if (i) s += " ";
                s += numbers[start + i];
            }
            s += ".";
            break;
        }
        case 3: {
            const std::size_t x = pick(5);
            const std::size_t y = pick(5);
            s = std::string(numbers[x]) + " plus " + std::string(numbers[y]) + " is " +
                std::string(numbers[x + y]) + ".";
            break;
        }
        case 4: {
            const std::string name(names[pick(names.size())]);
            s = name + " said \"the " + std::string(nouns[a]) + " is " + std::string(color_of(a)) +
                "\" and " + name + " went to the " + std::string(place_of(b)) + ".";
            break;
        }
        case 5:
            s = "where is the " + std::string(nouns[a]) + "? the " + std::string(nouns[a]) +
                " is at the " + std::string(place_of(a)) + ".";
            break;
        default:
            s = std::string(names[pick(names.size())]) + " " + std::string(verbs[pick(verbs.size())]) +
                " a " + std::string(color_of(b)) + " " + std::string(nouns[b]) + " by the " +
                std::string(place_of(b)) + ".";
            break;
        }
        out += s;
        out += pick(4) == 0 ? "\n" : " ";
    }
    out.resize(bytes);
    return out;
}

} // namespace gradmap
