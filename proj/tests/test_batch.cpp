#include <fstream>

#include "cmr/batch.hpp"
#include "cmr/datagen.hpp"
#include "cmr/volume_io.hpp"
#include "doctest.h"
#include "support/fake_recognizer.hpp"
#include "support/tempdir.hpp"

using namespace cmr;
namespace fs = std::filesystem;

namespace {

// A folder of phantom volumes, some mis-oriented, plus distractors.
struct Folder {
  support::TempDir dir;
  std::vector<Slice> refs;
  std::map<std::string, Volume> standard;  // relative path -> expected output

  Folder() {
    fs::create_directories(dir / "in" / "sub");
    const char* codes[] = {"000", "110", "001", "000", "111"};
    const char* names[] = {"a.nii", "b.nii.gz", "c.nii", "sub/d.nii.gz", "sub/e.nii"};
    for (int i = 0; i < 5; ++i) {
      Rng rng(std::uint64_t(100 + i));
      const Volume v = make_phantom_volume(rng, 40, 2, bssfp_profile(), 1.5).first;
      for (int z = 0; z < v.sz(); ++z) refs.push_back(v.slice(z));
      write_volume(apply_to_volume(OrientCode::parse(codes[i]), v), dir / "in" / names[i]);
      standard[names[i]] = v;
    }
    write_file_atomic(dir / "in" / "notes.txt", "ignore me");
    write_file_atomic(dir / "in" / ".hidden.nii", "ignore me too");
  }
  fs::path in() const { return dir / "in"; }
};

std::map<std::string, Action> actions(const BatchResult& r, const fs::path& root) {
  std::map<std::string, Action> m;
  for (const auto& rep : r.reports) m[fs::relative(rep.input, root).generic_string()] = rep.action;
  return m;
}

}  // namespace

TEST_CASE("find_volumes") {
  Folder f;
  const auto top = find_volumes(f.in(), false);
  REQUIRE(top.size() == 3);
  CHECK(top[0].filename() == "a.nii");
  CHECK(top[1].filename() == "b.nii.gz");
  CHECK(find_volumes(f.in(), true).size() == 5);
  CHECK(std::is_sorted(top.begin(), top.end()));
}

TEST_CASE("batch into an output folder mirrors the tree") {
  Folder f;
  const support::ReferenceRecognizer model(f.refs);
  BatchOptions o;
  o.input = f.in();
  o.output_dir = f.dir / "out";
  o.recursive = true;
  o.report_path = f.dir / "report.jsonl";
  const BatchResult r = adjust_batch(o, model);
  CHECK(r.exit_code == 0);
  REQUIRE(r.reports.size() == 5);
  const auto acts = actions(r, f.in());
  CHECK(acts.at("a.nii") == Action::AlreadyStandard);
  CHECK(acts.at("b.nii.gz") == Action::Corrected);
  CHECK(acts.at("sub/e.nii") == Action::Corrected);
  for (const auto& [name, vol] : f.standard) {
    const Volume out = read_volume(f.dir / "out" / name);
    CHECK((out.voxels == vol.voxels).all());
  }
  // Inputs untouched.
  CHECK(read_volume(f.in() / "b.nii.gz").dims[0] == f.standard.at("b.nii.gz").dims[1]);

  std::ifstream in(f.dir / "report.jsonl");
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) CHECK(nlohmann::json::parse(line).contains("action"));
  CHECK(lines == 5);
  CHECK(r.jsonl() == read_file_bytes(f.dir / "report.jsonl"));
}

TEST_CASE("batch in place, then again is a no-op") {
  Folder f;
  const support::ReferenceRecognizer model(f.refs);
  BatchOptions o;
  o.input = f.in();
  o.in_place = true;
  o.recursive = true;
  o.jobs = 3;
  CHECK(adjust_batch(o, model).exit_code == 0);
  for (const auto& [name, vol] : f.standard) CHECK((read_volume(f.in() / name).voxels == vol.voxels).all());
  const std::string before = read_file_bytes(f.in() / "b.nii.gz");
  const BatchResult again = adjust_batch(o, model);
  for (const auto& rep : again.reports) CHECK(rep.action == Action::AlreadyStandard);
  CHECK(read_file_bytes(f.in() / "b.nii.gz") == before);
}

TEST_CASE("per-file failures do not stop the batch") {
  Folder f;
  write_file_atomic(f.in() / "broken.nii", "garbage");
  const support::ReferenceRecognizer model(f.refs);
  BatchOptions o;
  o.input = f.in();
  o.output_dir = f.dir / "out";
  const BatchResult r = adjust_batch(o, model);
  CHECK(r.exit_code == 2);
  const auto acts = actions(r, f.in());
  CHECK(acts.at("broken.nii") == Action::Failed);
  CHECK(acts.at("b.nii.gz") == Action::Corrected);
  CHECK(fs::exists(f.dir / "out" / "c.nii"));

  const support::ReferenceRecognizer unsure(f.refs, 0.3);
  fs::remove(f.in() / "broken.nii");
  CHECK(adjust_batch(o, unsure).exit_code == 2);
}

TEST_CASE("setup errors are fatal and touch nothing") {
  Folder f;
  const support::ReferenceRecognizer model(f.refs);
  const std::string before = read_file_bytes(f.in() / "b.nii.gz");
  BatchOptions o;
  o.input = f.in();
  CHECK(adjust_batch(o, model).exit_code == 1);  // neither mode chosen
  o.in_place = true;
  o.output_dir = f.dir / "out";
  CHECK(adjust_batch(o, model).exit_code == 1);  // both
  o.output_dir.reset();
  o.jobs = 0;
  CHECK(adjust_batch(o, model).exit_code == 1);
  o.jobs = 1;
  o.input = f.dir / "nowhere";
  CHECK(adjust_batch(o, model).exit_code == 1);
  o.input = f.in();
  const BatchResult r = adjust_batch(o, f.dir / "no-model.json");
  CHECK(r.exit_code == 1);
  CHECK(r.fatal_error.find("no-model.json") != std::string::npos);
  CHECK(r.reports.empty());
  CHECK(read_file_bytes(f.in() / "b.nii.gz") == before);
}

TEST_CASE("parallel and serial runs agree") {
  Folder f;
  const support::ReferenceRecognizer model(f.refs);
  BatchOptions o;
  o.input = f.in();
  o.recursive = true;
  o.output_dir = f.dir / "serial";
  const BatchResult a = adjust_batch(o, model);
  o.output_dir = f.dir / "parallel";
  o.jobs = 4;
  const BatchResult b = adjust_batch(o, model);
  REQUIRE(a.reports.size() == b.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    CHECK(a.reports[i].input == b.reports[i].input);
    CHECK(a.reports[i].action == b.reports[i].action);
  }
  for (const auto& [name, _] : f.standard)
    CHECK(read_file_bytes(f.dir / "serial" / name) == read_file_bytes(f.dir / "parallel" / name));
}

TEST_CASE("empty folder") {
  support::TempDir dir;
  fs::create_directories(dir / "empty");
  const support::ScriptedRecognizer model({support::peaked(0, 1.0)});
  BatchOptions o;
  o.input = dir / "empty";
  o.output_dir = dir / "out";
  o.report_path = dir / "r.jsonl";
  const BatchResult r = adjust_batch(o, model);
  CHECK(r.exit_code == 0);
  CHECK(r.reports.empty());
  CHECK(read_file_bytes(dir / "r.jsonl").empty());
}
