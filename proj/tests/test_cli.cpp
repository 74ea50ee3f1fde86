#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mvdiff/synthdata.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mvdiff_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(MVDIFF_CLI_PATH) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string poses_json(std::initializer_list<double> azimuths) {
  nlohmann::json j = nlohmann::json::array();
  for (double az : azimuths) j.push_back(mvdiff::synthdata::camera_to_json(mvdiff::synthdata::ring_camera(az, 25, 1.5, 8)));
  return j.dump();
}

bool same_pngs(const fs::path& a, const fs::path& b) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".png") continue;
    if (slurp(e.path()) != slurp(b / e.path().filename())) return false;
    ++n;
  }
  return n > 0;
}

const char* kTiny = R"(
image_size = 8
base_channels = 8
channel_mult = 1, 2
attention_stages = false, true
projection_stages = false, true
grid_base = 4
compressed = 4
render_samples = 4
render_hidden = 8
agg_hidden = 8
refine_blocks = 1
temb_dim = 8
time_hidden = 16
proj_temb_dim = 4
lora_rank = 2
max_frames = 6
frames = 3
batch = 1
steps = 2
pretrain_steps = 2
pretrain_batch = 2
prior_count = 2
prior_steps = 1
log_every = 1
checkpoint_every = 1
)";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("end to end with exit codes") {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const std::string r = kRoot.string();

    SUBCASE("argument errors exit 2") {
      CHECK(run("") == 2);
      CHECK(run("frobnicate") == 2);
      CHECK(run("dataset --scenes 1") == 2);
      CHECK(run("dataset --scenes -1 --out " + r + "/d") == 2);
      CHECK(run("dataset --scenes 1 --size 0 --out " + r + "/d") == 2);
      CHECK(run("train --stage 3d --data " + r + "/d --out " + r + "/c") == 2);
      CHECK(run("verify --suite nope") == 2);
      CHECK(run("--help") == 0);
    }

    SUBCASE("dataset, train, sample and verify") {
      REQUIRE(run("dataset --scenes 2 --size 8 --seed 3 --out " + r + "/d1") == 0);
      REQUIRE(run("dataset --scenes 2 --size 8 --seed 3 --out " + r + "/d2") == 0);
      for (const auto& e : fs::recursive_directory_iterator(r + "/d1")) {
        if (!e.is_regular_file()) continue;
        CAPTURE(e.path().string());
        CHECK(slurp(e.path()) == slurp(kRoot / "d2" / fs::relative(e.path(), kRoot / "d1")));
      }
      // Refuses to overwrite without --force.
      CHECK(run("dataset --scenes 1 --size 8 --out " + r + "/d1") == 2);
      CHECK(run("dataset --scenes 1 --size 8 --force --out " + r + "/d2") == 0);

      write(kRoot / "tiny.cfg", kTiny);
      const std::string cfg = " --config " + r + "/tiny.cfg --quiet";
      CHECK(run("train --stage mv --data " + r + "/d1 --out " + r + "/mv" + cfg) == 2);
      CHECK(run("train --stage mv --data " + r + "/d1 --init " + r + "/missing --out " + r + "/mv" + cfg) == 2);
      write(kRoot / "bad.cfg", "frames = many\n");
      CHECK(run("train --stage 2d --data " + r + "/d1 --out " + r + "/x --config " + r + "/bad.cfg") == 2);
      REQUIRE(run("train --stage 2d --data " + r + "/d1 --out " + r + "/c2d" + cfg) == 0);
      REQUIRE(run("train --stage mv --data " + r + "/d1 --init " + r + "/c2d --out " + r + "/cmv" + cfg) == 0);
      CHECK(fs::exists(kRoot / "cmv" / "params.bin"));

      write(kRoot / "poses.json", poses_json({0, 45, 90}));
      const std::string samp = "sample --mode uncond --ckpt " + r + "/cmv --poses " + r +
                               "/poses.json --steps 3 --seed 9 --caption 'red cube' --out ";
      REQUIRE(run(samp + r + "/s1") == 0);
      REQUIRE(run(samp + r + "/s2") == 0);
      CHECK(same_pngs(kRoot / "s1", kRoot / "s2"));
      CHECK(fs::exists(kRoot / "s1" / "frame_002.png"));
      const auto manifest = nlohmann::json::parse(slurp(kRoot / "s1" / "manifest.json"));
      CHECK(manifest["seed"] == 9);
      CHECK(manifest["frames"] == 3);

      write(kRoot / "one.json", poses_json({180}));
      CHECK(run("sample --mode cond --ckpt " + r + "/cmv --poses " + r + "/poses.json --cond-images " + r +
                "/s1/frame_000.png --cond-poses " + r + "/one.json --steps 2 --out " + r + "/s3") == 0);
      CHECK(fs::exists(kRoot / "s3" / "frame_002.png"));

      write(kRoot / "broken.json", "[{\"fx\": ");
      CHECK(run("sample --mode uncond --ckpt " + r + "/cmv --poses " + r + "/broken.json --out " + r + "/s4") == 2);
      write(kRoot / "many.json", poses_json({0, 10, 20, 30, 40, 50, 60}));
      CHECK(run("sample --mode uncond --ckpt " + r + "/cmv --poses " + r + "/many.json --out " + r + "/s5") == 2);
      CHECK(run("sample --mode uncond --ckpt " + r + "/cmv --poses " + r +
                "/poses.json --caption 'a b c d e f' --out " + r + "/s6") == 2);
      CHECK(run("sample --mode cond --ckpt " + r + "/cmv --poses " + r + "/poses.json --out " + r + "/s7") == 2);
      CHECK(run("sample --mode uncond --ckpt " + r + "/nothing --poses " + r + "/poses.json --out " + r + "/s8") == 2);

      CHECK(run("verify --suite geometry --report " + r + "/verify.json") == 0);
      CHECK(nlohmann::json::parse(slurp(kRoot / "verify.json"))["passed"] == true);
    }
    fs::remove_all(kRoot);
  }
}
