// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdlib>
#include <random>
#include <string>

#include "querec/io.hpp"
#include "querec/pipeline.hpp"

namespace querec::testing {

inline fs::path data_dir() { return fs::path(QUEREC_TEST_DATA); }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("querec-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
  fs::path path_;
};

/// The synthetic corpus config with its output redirected to `out`.
inline PipelineConfig synth_config(const fs::path& out) {
  json j = json::parse(read_file(data_dir() / "synth" / "config.json"));
  j["output_dir"] = out.string();
  return config_from_json(j, data_dir() / "synth");
}

inline Interaction make_interaction(std::string user, std::string item, std::int64_t ts,
                                    std::string review = "") {
  return {std::move(user), std::move(item), 5.0, std::move(review), ts};
}

}  // namespace querec::testing
