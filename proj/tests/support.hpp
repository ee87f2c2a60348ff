#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "volseq/error.hpp"

namespace testing_support {

template <typename F>
volseq::ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const volseq::Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a volseq::Error";
  return volseq::ErrorKind::Config;
}

// Fresh per-test directory under the system temp dir; removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "volseq_" + tag;
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
