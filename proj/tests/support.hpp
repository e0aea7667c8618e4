#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "attncache/model.hpp"

namespace testing_support {

// Removed with its contents on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "attncache") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline attncache::ModelConfig small_config(std::uint32_t layers = 2, std::uint32_t heads = 2,
                                           std::uint32_t head_dim = 8, std::uint32_t max_seq = 32) {
    attncache::ModelConfig c;
    c.num_layers = layers;
    c.num_heads = heads;
    c.head_dim = head_dim;
    c.hidden_dim = heads * head_dim;
    c.ffn_dim = 4 * c.hidden_dim;
    c.vocab_size = 64;
    c.max_seq_len = max_seq;
    return c;
}

inline attncache::Sentence random_sentence(std::mt19937_64& rng, std::size_t len, std::uint32_t vocab) {
    std::uniform_int_distribution<attncache::TokenId> t(0, vocab - 1);
    attncache::Sentence s(len);
    for (auto& x : s) x = t(rng);
    return s;
}

}  // namespace testing_support
