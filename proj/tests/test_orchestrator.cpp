#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "patchforge/orchestrator.hpp"

using namespace patchforge;
using pftest::PyRepo;
using pftest::TempDir;

namespace {

const std::string kFailingTest =
    "from calc import add\n\nassert add(2, 3) == 5\nprint('ok')\n";
const std::string kPassingTest =
    "from calc import add\n\nassert add(0, 0) == 0\nprint('ok')\n";
const std::string kSecondFailingTest =
    "from calc import add\n\nassert add(10, 5) == 15\nprint('ok')\n";

json tcall(const std::string& name, json args) {
  return {{"name", name}, {"args", std::move(args)}};
}

json editor_create(const std::string& path, const std::string& text) {
  return tcall("editor", {{"command", "create"}, {"path", path}, {"content", text}});
}

json editor_replace(const std::string& path, const std::string& olds, const std::string& news) {
  return tcall("editor",
               {{"command", "str_replace"}, {"path", path}, {"old_str", olds}, {"new_str", news}});
}

json submit_call() { return tcall("submitter", json::object()); }

json turn(std::vector<json> calls, long prompt = -1, long completion = -1) {
  json t = {{"content", "working"}, {"tool_calls", json::array()}};
  for (auto& c : calls) t["tool_calls"].push_back(std::move(c));
  if (prompt >= 0) t["prompt_tokens"] = prompt;
  if (completion >= 0) t["completion_tokens"] = completion;
  return t;
}

json create_and_submit(const std::string& path, const std::string& text) {
  return turn({editor_create(path, text), submit_call()});
}

json fix_and_submit(const std::string& news) {
  return turn({editor_replace("calc.py", "    return a - b", news), submit_call()});
}

struct StageFixture {
  PyRepo repo;
  TempDir prompts;
  StageConfig cfg;
  TaskInput input;

  StageFixture() : repo(pftest::calc_repo_files()) {
    pftest::write_prompts(prompts.dir);
    cfg.prompt_dir = prompts.dir;
    cfg.pricing = PricingConfig::parse("0.27", "1.10");
    input = pftest::make_input(repo.dir);
  }
};

size_t invocation_count(const std::vector<Trajectory>& trajectories) {
  size_t n = 0;
  for (const auto& t : trajectories)
    for (const auto& e : t.turns)
      if (e.kind == TrajectoryEvent::Kind::tool_invocation) ++n;
  return n;
}

size_t count_role(const std::vector<Trajectory>& trajectories, AgentRoleKind role) {
  size_t n = 0;
  for (const auto& t : trajectories)
    if (t.role == role) ++n;
  return n;
}

// Hand-built candidates for stage2 tests.
Patch test_patch_of(const std::string& path, const std::string& body, int round = 0) {
  return make_patch(PatchKind::test, diff_trees({}, {{path, body}}),
                    PatchProducer::test_generator, round);
}

Patch code_patch_of(const std::string& after, int round = 0) {
  std::map<std::string, std::string> before{{"calc.py", pftest::calc_repo_files().at("calc.py")}};
  return make_patch(PatchKind::code, diff_trees(before, {{"calc.py", after}}),
                    PatchProducer::code_generator, round);
}

CandidateBundle bundle_of(Patch code, std::vector<Patch> tests, int iteration,
                          bool verified = true) {
  CandidateBundle b;
  b.code_patch = std::move(code);
  b.test_patches = std::move(tests);
  b.iteration_created = iteration;
  b.verified = verified;
  return b;
}

const std::string kGoodBody = "def add(a, b):\n    return a + b\n";
const std::string kSwappedBody = "def add(a, b):\n    return b + a\n";
const std::string kVerboseBody =
    "def add(a, b):\n    total = a\n    total += b\n    return total\n";
const std::string kPartialBody =
    "def add(a, b):\n    if a > 0:\n        return a + b\n    return a - b\n";

}  // namespace

TEST_CASE("rank_candidates agrees with a lexicographic tuple oracle") {
  std::mt19937 rng(20260814u);
  std::uniform_int_distribution<int> small(0, 3);
  for (int trial = 0; trial < 300; ++trial) {
    size_t n = 1 + rng() % 6;
    std::vector<CandidateScore> scores;
    for (size_t i = 0; i < n; ++i) {
      CandidateScore s;
      s.index = i;
      s.union_passes = small(rng);
      s.regression_passes = small(rng) % 2;
      s.diff_size = 1 + small(rng);
      s.iteration_created = small(rng);
      scores.push_back(s);
    }
    auto key = [&](size_t i) {
      return std::tuple(-scores[i].union_passes, -scores[i].regression_passes,
                        scores[i].diff_size, scores[i].iteration_created, i);
    };
    std::vector<size_t> expect(n);
    std::iota(expect.begin(), expect.end(), 0);
    std::sort(expect.begin(), expect.end(),
              [&](size_t a, size_t b) { return key(a) < key(b); });

    std::vector<size_t> got = rank_candidates(scores);
    REQUIRE(got == expect);

    long best_union = 0;
    for (const auto& s : scores) best_union = std::max(best_union, s.union_passes);
    CHECK(scores[got.front()].union_passes == best_union);
  }
}

TEST_CASE("rank_candidates applies the four keys in order") {
  std::vector<CandidateScore> scores{{0, 1, 1, 2, 0},   // fewer union passes
                                     {1, 2, 0, 2, 0},   // fails regression
                                     {2, 2, 1, 9, 0},   // bigger diff
                                     {3, 2, 1, 2, 1},   // later iteration
                                     {4, 2, 1, 2, 0}};  // best on every key
  CHECK(rank_candidates(scores) == std::vector<size_t>{4, 3, 2, 1, 0});
}

TEST_CASE("stage1 happy path runs to the iteration cap") {
  StageFixture fx;
  fx.cfg.max_iterations = 1;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator", {create_and_submit("tests/test_add.py", kFailingTest)}},
       {"code_generator", {fix_and_submit("    return a + b")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::cap_reached);
  CHECK(out.rounds_executed == 1);
  CHECK(out.test_gen_runs == 1);
  REQUIRE(out.bundles.size() == 1);
  CHECK(out.bundles[0].verified);
  CHECK(out.bundles[0].iteration_created == 0);
  CHECK(out.bundles[0].code_patch.parse().paths() == std::vector<std::string>{"calc.py"});
  REQUIRE(out.bundles[0].test_patches.size() == 1);
  CHECK(out.bundles[0].verification.at("tests/test_add.py"));
}

TEST_CASE("reproduction gate rejects passing tests and retries") {
  StageFixture fx;
  fx.cfg.max_iterations = 1;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator",
        {create_and_submit("tests/test_noop.py", kPassingTest),
         create_and_submit("tests/test_add.py", kFailingTest)}},
       {"code_generator", {fix_and_submit("    return a + b")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::cap_reached);
  CHECK(out.test_gen_runs == 2);
  REQUIRE(out.bundles.size() == 1);
  CHECK(out.bundles[0].verified);
}

TEST_CASE("no reproducing test falls back to one unverified code run") {
  StageFixture fx;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator",
        {create_and_submit("tests/test_noop.py", kPassingTest),
         create_and_submit("tests/test_zero.py", kPassingTest)}},
       {"code_generator", {fix_and_submit("    return a + b")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::no_reproducing_test);
  CHECK(out.rounds_executed == 1);
  CHECK(out.test_gen_runs == 2);
  REQUIRE(out.bundles.size() == 1);
  CHECK_FALSE(out.bundles[0].verified);
  CHECK(out.bundles[0].test_patches.empty());
  CHECK_FALSE(out.selected.has_value());
}

TEST_CASE("test generator that cannot submit ends the stage") {
  StageFixture fx;
  ScriptedBackend backend = ScriptedBackend::from_json({{"code_generator", json::array()}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::generator_failed);
  CHECK(out.test_gen_runs == 1);
  CHECK(out.bundles.empty());
  CHECK(out.trajectories.size() == 1);  // the failed test-generator run is kept
}

TEST_CASE("code generator that never verifies ends the stage") {
  StageFixture fx;
  fx.cfg.max_iterations = 1;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator", {create_and_submit("tests/test_add.py", kFailingTest)}},
       {"code_generator",
        {fix_and_submit("    return a - b  # noted"), fix_and_submit("    return a * b")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::generator_failed);
  CHECK(out.bundles.empty());
  CHECK(count_role(out.trajectories, AgentRoleKind::code_generator) == 2);
}

TEST_CASE("strengthened tests that still pass end refinement") {
  StageFixture fx;
  fx.cfg.max_iterations = 3;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator",
        {create_and_submit("tests/test_add.py", kFailingTest),
         create_and_submit("tests/test_add2.py", kSecondFailingTest)}},
       {"code_generator",
        // The top-up rollout repeats the same fix; the duplicate stops it.
        {fix_and_submit("    return a + b"), fix_and_submit("    return a + b")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::tests_strengthened_still_passing);
  CHECK(out.rounds_executed == 2);
  CHECK(out.test_gen_runs == 2);
  CHECK(out.bundles.size() == 1);
}

TEST_CASE("top-up adds distinct verified candidates until the script runs dry") {
  StageFixture fx;
  fx.cfg.max_iterations = 3;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator",
        {create_and_submit("tests/test_add.py", kFailingTest),
         create_and_submit("tests/test_add2.py", kSecondFailingTest)}},
       {"code_generator",
        {fix_and_submit("    return a + b"), fix_and_submit("    return b + a")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::tests_strengthened_still_passing);
  REQUIRE(out.bundles.size() == 2);
  CHECK(out.bundles[0].iteration_created == 0);
  CHECK(out.bundles[1].iteration_created == 1);
  CHECK(out.bundles[1].verified);
  // Top-up candidates are verified against the settled suite, not the
  // discarded strengthening patch.
  CHECK(out.bundles[1].test_patches.size() == 1);
}

TEST_CASE("refinement never exceeds the iteration cap") {
  StageFixture fx;
  fx.cfg.max_iterations = 2;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator",
        {create_and_submit("tests/test_add.py", kFailingTest),
         create_and_submit("tests/test_add2.py", kSecondFailingTest)}},
       {"code_generator",
        // Round 0 special-cases the first test; round 1 fixes for real.
        {fix_and_submit("    if (a, b) == (2, 3):\n        return 5\n    return a - b"),
         fix_and_submit("    return a + b")}}});

  StageOutcome out = stage1(fx.input, fx.cfg, backend);
  CHECK(out.termination == Termination::cap_reached);
  CHECK(out.rounds_executed == 2);
  CHECK(out.test_gen_runs == 2);
  REQUIRE(out.bundles.size() == 2);
  CHECK(out.bundles[1].test_patches.size() == 2);
}

TEST_CASE("disabling the adversarial loop leaves a single test round") {
  StageFixture fx;
  fx.cfg.adversarial_enabled = false;
  fx.cfg.max_iterations = 3;

  SECTION("accepted test still yields one bundle") {
    ScriptedBackend backend = ScriptedBackend::from_json(
        {{"test_generator", {create_and_submit("tests/test_add.py", kFailingTest)}},
         {"code_generator", {fix_and_submit("    return a + b")}}});
    StageOutcome out = stage1(fx.input, fx.cfg, backend);
    CHECK(out.termination == Termination::cap_reached);
    CHECK(out.rounds_executed == 1);
    CHECK(out.test_gen_runs == 1);
    CHECK(out.bundles.size() == 1);
  }

  SECTION("a rejected test is not retried") {
    ScriptedBackend backend = ScriptedBackend::from_json(
        {{"test_generator",
          {create_and_submit("tests/test_noop.py", kPassingTest),
           create_and_submit("tests/test_add.py", kFailingTest)}},
         {"code_generator", {fix_and_submit("    return a + b")}}});
    StageOutcome out = stage1(fx.input, fx.cfg, backend);
    CHECK(out.termination == Termination::no_reproducing_test);
    CHECK(out.test_gen_runs == 1);
  }
}

TEST_CASE("reproduces_on_base distinguishes failing from passing tests") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  CHECK(reproduces_on_base(ws, fx.input.env,
                           test_patch_of("tests/test_fail.py", kFailingTest)));
  CHECK_FALSE(reproduces_on_base(ws, fx.input.env,
                                 test_patch_of("tests/test_pass.py", kPassingTest)));
}

TEST_CASE("stage2 ranks by union passes first") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  ScriptedBackend backend;
  Patch t_pos = test_patch_of("tests/test_add_pos.py", kFailingTest);
  Patch t_neg = test_patch_of("tests/test_add_neg.py",
                              "from calc import add\n\nassert add(-1, -1) == -2\nprint('ok')\n");

  StageOutcome out;
  out.bundles.push_back(bundle_of(code_patch_of(kPartialBody), {t_pos}, 0));
  out.bundles.push_back(bundle_of(code_patch_of(kGoodBody), {t_pos, t_neg}, 0));
  stage2(fx.input, fx.cfg, backend, ws, out);

  REQUIRE(out.selected_index.has_value());
  CHECK(*out.selected_index == 1);
  CHECK(out.selected->diff_text == out.bundles[1].code_patch.diff_text);
  // 2 union tests + 1 regression command per bundle.
  CHECK(out.stage2_executions == 6);

  StageOutcome swapped;
  swapped.bundles.push_back(bundle_of(code_patch_of(kGoodBody), {t_pos, t_neg}, 0));
  swapped.bundles.push_back(bundle_of(code_patch_of(kPartialBody), {t_pos}, 0));
  stage2(fx.input, fx.cfg, backend, ws, swapped);
  CHECK(*swapped.selected_index == 0);
}

TEST_CASE("stage2 breaks equal pass sets by diff size, then iteration") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  ScriptedBackend backend;
  Patch t_pos = test_patch_of("tests/test_add_pos.py", kFailingTest);

  SECTION("smaller diff wins") {
    StageOutcome out;
    out.bundles.push_back(bundle_of(code_patch_of(kVerboseBody), {t_pos}, 0));
    out.bundles.push_back(bundle_of(code_patch_of(kGoodBody), {t_pos}, 0));
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 1);
  }

  SECTION("earlier iteration wins") {
    StageOutcome out;
    out.bundles.push_back(bundle_of(code_patch_of(kGoodBody, 1), {t_pos}, 1));
    out.bundles.push_back(bundle_of(code_patch_of(kSwappedBody, 0), {t_pos}, 0));
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 1);
    CHECK(count_role(out.trajectories, AgentRoleKind::selector) == 0);
  }
}

TEST_CASE("stage2 consults the selector only on exact ties") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  Patch t_pos = test_patch_of("tests/test_add_pos.py", kFailingTest);

  auto tied_outcome = [&]() {
    StageOutcome out;
    out.bundles.push_back(bundle_of(code_patch_of(kGoodBody), {t_pos}, 0));
    out.bundles.push_back(bundle_of(code_patch_of(kSwappedBody), {t_pos}, 0));
    return out;
  };

  SECTION("scripted selector picks a tied candidate") {
    ScriptedBackend backend =
        ScriptedBackend::from_json({{"selector", {{{"content", "candidate 1 wins"}}}}});
    StageOutcome out = tied_outcome();
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 1);
    CHECK(count_role(out.trajectories, AgentRoleKind::selector) == 1);
    CHECK(out.stage2_executions == 4);
  }

  SECTION("a reply without digits falls back to the first tied candidate") {
    ScriptedBackend backend =
        ScriptedBackend::from_json({{"selector", {{{"content", "the first seems right"}}}}});
    StageOutcome out = tied_outcome();
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 0);
  }

  SECTION("an out-of-range index falls back") {
    ScriptedBackend backend = ScriptedBackend::from_json({{"selector", {{{"content", "5"}}}}});
    StageOutcome out = tied_outcome();
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 0);
  }

  SECTION("a missing selector template falls back silently") {
    fs::remove(fx.prompts.dir / "selector.txt");
    ScriptedBackend backend;
    StageOutcome out = tied_outcome();
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 0);
    CHECK(out.trajectories.empty());
  }

  SECTION("an exhausted selector script falls back") {
    ScriptedBackend backend;  // no selector turns at all
    StageOutcome out = tied_outcome();
    stage2(fx.input, fx.cfg, backend, ws, out);
    CHECK(*out.selected_index == 0);
    CHECK(out.trajectories.empty());
  }
}

TEST_CASE("stage2 skips conflicting union test patches deterministically") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  ScriptedBackend backend;
  Patch t_a = test_patch_of("tests/test_x.py", kFailingTest);
  Patch t_b = test_patch_of("tests/test_x.py",
                            "from calc import add\n\nassert add(3, 2) == 5\nprint('x')\n");

  StageOutcome out;
  out.bundles.push_back(bundle_of(code_patch_of(kGoodBody, 0), {t_a}, 0));
  out.bundles.push_back(bundle_of(code_patch_of(kSwappedBody, 1), {t_b}, 1));
  stage2(fx.input, fx.cfg, backend, ws, out);

  // The second creation of tests/test_x.py conflicts and is dropped, so each
  // bundle runs one union test plus the regression command.
  CHECK(out.stage2_executions == 4);
  CHECK(*out.selected_index == 0);
}

TEST_CASE("disabling selection picks the first verified bundle with no executions") {
  StageFixture fx;
  fx.cfg.selection_enabled = false;
  Workspace ws = Workspace::create(fx.input, {});
  ScriptedBackend backend;
  Patch t_pos = test_patch_of("tests/test_add_pos.py", kFailingTest);

  StageOutcome out;
  out.bundles.push_back(bundle_of(code_patch_of(kPartialBody), {}, 0, false));
  out.bundles.push_back(bundle_of(code_patch_of(kGoodBody), {t_pos}, 0, true));
  stage2(fx.input, fx.cfg, backend, ws, out);
  CHECK(*out.selected_index == 1);
  CHECK(out.stage2_executions == 0);
}

TEST_CASE("a singleton candidate is selected without re-verification") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  ScriptedBackend backend;

  StageOutcome out;
  out.bundles.push_back(bundle_of(code_patch_of(kGoodBody),
                                  {test_patch_of("tests/test_add_pos.py", kFailingTest)}, 0));
  stage2(fx.input, fx.cfg, backend, ws, out);
  CHECK(*out.selected_index == 0);
  CHECK(out.stage2_executions == 0);
}

TEST_CASE("stage2 with no candidates throws") {
  StageFixture fx;
  Workspace ws = Workspace::create(fx.input, {});
  ScriptedBackend backend;
  StageOutcome out;
  CHECK_THROWS_AS(stage2(fx.input, fx.cfg, backend, ws, out), NoCandidates);
}

TEST_CASE("resolve sums tokens, cost, and tool telemetry from the trajectories") {
  StageFixture fx;
  fx.cfg.max_iterations = 1;
  ScriptedBackend backend = ScriptedBackend::from_json(
      {{"test_generator",
        {turn({editor_create("tests/test_add.py", kFailingTest), submit_call()}, 100, 10)}},
       {"code_generator",
        {turn({editor_replace("calc.py", "    return a - b", "    return a + b"), submit_call()},
              200, 20)}}});

  RunReport report = resolve(fx.input, fx.cfg, backend);
  CHECK(report.completed);
  CHECK(report.failure_detail.empty());
  CHECK(report.termination == Termination::cap_reached);
  CHECK(report.bundle_count == 1);
  REQUIRE(report.selected_index.has_value());
  CHECK(*report.selected_index == 0);
  CHECK(report.stage2_executions == 0);

  CHECK(report.prompt_tokens == 300);
  CHECK(report.completion_tokens == 30);
  CHECK(report.cost_usd == Decimal::parse("0.114"));
  Decimal from_turns = accrue_cost({100, 10}, fx.cfg.pricing);
  from_turns += accrue_cost({200, 20}, fx.cfg.pricing);
  CHECK(report.cost_usd == from_turns);

  CHECK(report.telemetry.total_calls() ==
        static_cast<long>(invocation_count(report.trajectories)));
  CHECK(report.telemetry.total_calls() == 4);

  CHECK(report.final_patch.parse().paths() == std::vector<std::string>{"calc.py"});
  CHECK(report.to_json()["cost_usd"] == "0.114");
  CHECK(report.to_json()["termination"] == "cap_reached");
}

TEST_CASE("resolve without candidates emits an empty patch and a reason") {
  StageFixture fx;
  ScriptedBackend backend = ScriptedBackend::from_json({{"code_generator", json::array()}});

  RunReport report = resolve(fx.input, fx.cfg, backend);
  CHECK(report.completed);
  CHECK(report.termination == Termination::generator_failed);
  CHECK(report.final_patch.diff_text.empty());
  CHECK(report.failure_detail == "no candidate selected");
  CHECK_FALSE(report.selected_index.has_value());
  CHECK_FALSE(report.to_json().contains("selected_index"));
}
