#include "cmr/batch.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "cmr/volume_io.hpp"

namespace cmr {

namespace fs = std::filesystem;

std::string BatchResult::jsonl() const {
  std::string out;
  for (const auto& r : reports) out += r.to_json().dump() + "\n";
  return out;
}

namespace {

bool is_volume_file(const fs::path& p) {
  const std::string name = p.filename().string();
  return !name.starts_with(".") && (name.ends_with(".nii") || name.ends_with(".nii.gz"));
}

BatchResult fatal(std::string message) {
  BatchResult r;
  r.exit_code = 1;
  r.fatal_error = std::move(message);
  return r;
}

}  // namespace

std::vector<fs::path> find_volumes(const fs::path& folder, bool recursive) {
  std::vector<fs::path> out;
  auto visit = [&](const fs::directory_entry& e) {
    if (e.is_regular_file() && is_volume_file(e.path())) out.push_back(e.path());
  };
  if (recursive)
    for (const auto& e : fs::recursive_directory_iterator(folder)) visit(e);
  else
    for (const auto& e : fs::directory_iterator(folder)) visit(e);
  std::sort(out.begin(), out.end());
  return out;
}

BatchResult adjust_batch(const BatchOptions& opts, const OrientationRecognizer& model) {
  if (!fs::is_directory(opts.input)) return fatal("input folder does not exist: " + opts.input.string());
  if (opts.in_place == opts.output_dir.has_value()) return fatal("choose exactly one of in-place mode or an output folder");
  if (opts.jobs < 1) return fatal("jobs must be at least 1");

  std::vector<fs::path> files;
  try {
    files = find_volumes(opts.input, opts.recursive);
  } catch (const fs::filesystem_error& e) {
    return fatal(e.what());
  }

  BatchResult result;
  result.reports.resize(files.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < files.size();) {
      const fs::path& in = files[i];
      fs::path out = in;
      if (opts.output_dir) {
        out = *opts.output_dir / fs::relative(in, opts.input);
        std::error_code ec;
        fs::create_directories(out.parent_path(), ec);
      }
      result.reports[i] = standardize_file(in, out, model, opts.confidence_floor);
    }
  };
  const int threads = std::min<int>(opts.jobs, int(std::max<std::size_t>(files.size(), 1)));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (const auto& r : result.reports)
    if (r.action == Action::Failed || r.action == Action::SkippedLowConfidence) result.exit_code = 2;
  if (opts.report_path) {
    try {
      write_file_atomic(*opts.report_path, result.jsonl());
    } catch (const std::exception& e) {
      result.fatal_error = e.what();
      result.exit_code = 1;
    }
  }
  return result;
}

BatchResult adjust_batch(const BatchOptions& opts, const fs::path& model_path) {
  std::shared_ptr<const OrientationRecognizer> model;
  try {
    model = load_recognizer(model_path);
  } catch (const std::exception& e) {
    return fatal("cannot load model '" + model_path.string() + "': " + e.what());
  }
  return adjust_batch(opts, *model);
}

}  // namespace cmr
