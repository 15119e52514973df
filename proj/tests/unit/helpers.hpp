#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "pedetect/synthcorpus.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("pedetect-" + name + "-" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Small, fast corpus geometry.
inline pedetect::synth::CorpusConfig tiny_corpus(std::int64_t studies = 10) {
  pedetect::synth::CorpusConfig c;
  c.study_count = studies;
  c.volume_shape = {16, 32, 32};
  c.test_study_count = 0;
  return c;
}

}  // namespace testing
