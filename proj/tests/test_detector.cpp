#include "test_util.hpp"
#include "vilod/detector.hpp"
#include "vilod/error.hpp"
#include "vilod/protocol.hpp"
#include "vilod/synthetic_world.hpp"

#include <doctest.h>

#include <cmath>
#include <future>
#include <thread>

using namespace vilod;

namespace {

WorldOptions small_world() {
  WorldOptions o;
  o.pool = 120;
  o.validation = 30;
  o.test = 30;
  o.dim = 16;
  return o;
}

std::vector<LabeledImage> manifest_of(const SyntheticWorld& w, std::size_t n) {
  std::vector<LabeledImage> m;
  for (const auto& id : w.registry.ids(Split::TrainPool)) {
    if (m.size() == n) break;
    m.push_back({id, w.truth.at(id)});
  }
  return m;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::InvalidArgument;
}

} // namespace

TEST_CASE("synthetic skill: logistic and monotone updates") {
  auto s = default_skill(4);
  CHECK(synthetic_update_skill(s, {}) == s);

  std::vector<GroundTruthBox> ten(10, GroundTruthBox{2, 0.5, 0.5, 0.1, 0.1});
  const auto s2 = synthetic_update_skill(s, ten);
  CHECK(s2.classes[2].detect_prob() > s.classes[2].detect_prob());
  CHECK(s2.classes[2].labeled_count == 10);
  CHECK(s2.classes[0] == s.classes[0]);
  CHECK(s2.classes[2].sigma < s.classes[2].sigma);
  CHECK(s2.classes[2].conf_mean > s.classes[2].conf_mean);

  const std::vector<GroundTruthBox> bad{{9, 0.5, 0.5, 0.1, 0.1}};
  CHECK(code_of([&] { synthetic_update_skill(s, bad); }) == Errc::UnknownClass);

  // path independence
  const auto once = synthetic_update_skill(s, std::vector<GroundTruthBox>(20, GroundTruthBox{1, 0.5, 0.5, 0.1, 0.1}));
  const auto twice = synthetic_update_skill(
      synthetic_update_skill(s, std::vector<GroundTruthBox>(7, GroundTruthBox{1, 0.5, 0.5, 0.1, 0.1})),
      std::vector<GroundTruthBox>(13, GroundTruthBox{1, 0.5, 0.5, 0.1, 0.1}));
  CHECK(once.classes[1].labeled_count == twice.classes[1].labeled_count);
  CHECK(once.classes[1].sigma == doctest::Approx(twice.classes[1].sigma).epsilon(1e-12));
  CHECK(once.classes[1].conf_mean == doctest::Approx(twice.classes[1].conf_mean).epsilon(1e-12));
  CHECK(once.fp_prob == doctest::Approx(twice.fp_prob).epsilon(1e-12));
}

TEST_CASE("synthetic skill: five iterations of 30 labels, detect_prob recomputed from counts") {
  Rng rng(8);
  auto s = default_skill(4);
  std::vector<std::size_t> counts(4, 0);
  std::vector<double> prev(4, 0.0);
  for (int it = 0; it < 5; ++it) {
    std::vector<GroundTruthBox> batch;
    for (int i = 0; i < 30; ++i) {
      const auto b = testing::random_box(rng, 4);
      batch.push_back(b);
      ++counts[static_cast<std::size_t>(b.class_id)];
    }
    const auto before = s;
    s = synthetic_update_skill(s, batch);
    for (std::size_t c = 0; c < 4; ++c) {
      const double oracle = 1.0 / (1.0 + std::exp(-(0.06 * static_cast<double>(counts[c]) - 1.0)));
      CHECK(s.classes[c].detect_prob() == doctest::Approx(oracle).epsilon(1e-12));
      CHECK(s.classes[c].detect_prob() >= prev[c]);
      CHECK(s.classes[c].sigma <= before.classes[c].sigma);
      CHECK(s.classes[c].conf_mean >= before.classes[c].conf_mean);
      prev[c] = s.classes[c].detect_prob();
    }
  }
}

TEST_CASE("synthetic_detect: never, perfect, deterministic") {
  const std::vector<GroundTruthBox> truth{{0, 0.3, 0.3, 0.2, 0.2}, {2, 0.7, 0.6, 0.3, 0.1}};
  auto never = default_skill(3);
  for (auto& c : never.classes) c.b = -std::numeric_limits<double>::infinity();
  never.fp_prob = 0.0;
  for (int i = 0; i < 50; ++i) CHECK(synthetic_detect(never, "img" + std::to_string(i), truth, 0).empty());

  const auto perfect = perfect_skill(3, 0.8);
  const auto dets = synthetic_detect(perfect, "x", truth, 3);
  REQUIRE(dets.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(dets[i].class_id == truth[i].class_id);
    CHECK(dets[i].cx == doctest::Approx(truth[i].cx).epsilon(1e-12));
    CHECK(dets[i].cy == doctest::Approx(truth[i].cy).epsilon(1e-12));
    CHECK(dets[i].w == doctest::Approx(truth[i].w).epsilon(1e-12));
    CHECK(dets[i].h == doctest::Approx(truth[i].h).epsilon(1e-12));
    CHECK(dets[i].confidence == 0.8);
    CHECK(dets[i].model_version == 3);
  }

  const auto s = default_skill(3);
  CHECK(synthetic_detect(s, "abc", truth, 1) == synthetic_detect(s, "abc", truth, 1));
  for (const auto& d : synthetic_detect(s, "abc", truth, 1)) {
    CHECK(d.confidence >= 0.0);
    CHECK(d.confidence <= 1.0);
    CHECK(d.cx - d.w / 2 >= -1e-12);
    CHECK(d.cx + d.w / 2 <= 1.0 + 1e-12);
  }
}

TEST_CASE("SyntheticDetector: training stream, lineage and errors") {
  const auto world = make_synthetic_world(small_world());
  SyntheticDetector det(world.view(), default_skill(4));

  TrainRequest req;
  req.session = "alice";
  req.manifest = manifest_of(world, 40);
  std::vector<EpochMetrics> stream;
  const auto m0 = det.train(req, [&](const EpochMetrics& m) { stream.push_back(m); });
  REQUIRE(stream.size() == 50);
  CHECK(m0.version == 0);
  CHECK_FALSE(m0.parent.has_value());
  CHECK(m0.train_config == TrainConfig{50, 640, 42});
  double best = -1;
  int best_epoch = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    CHECK(stream[i].epoch == static_cast<int>(i) + 1);
    CHECK(stream[i].map50 >= 0.0);
    CHECK(stream[i].map50 <= 1.0);
    CHECK(std::isfinite(stream[i].box_loss));
    if (stream[i].map50_95 >= best) {
      best = stream[i].map50_95;
      best_epoch = stream[i].epoch;
    }
  }
  CHECK(m0.best_epoch == best_epoch);

  req.parent = m0;
  req.manifest = manifest_of(world, 70);
  const auto m1 = det.train(req, nullptr);
  CHECK(m1.version == 1);
  CHECK(m1.parent == std::optional<int>(0));

  TrainRequest empty;
  CHECK(code_of([&] { det.train(empty, nullptr); }) == Errc::InvalidArgument);

  ModelVersion ghost;
  ghost.weights_ref = "nope";
  const std::vector<std::string> ids{"syn_p00000"};
  CHECK(code_of([&] { det.infer(ghost, ids); }) == Errc::UnknownModel);
  TrainRequest orphan = req;
  orphan.parent = ghost;
  CHECK(code_of([&] { det.train(orphan, nullptr); }) == Errc::UnknownModel);

  det.inject_failures(1);
  CHECK(code_of([&] { det.train(req, nullptr); }) == Errc::TrainingFailed);
  CHECK(det.train(req, nullptr).version == 1);
}

TEST_CASE("SyntheticDetector: restore_model refits the same model") {
  const auto world = make_synthetic_world(small_world());
  SyntheticDetector first(world.view(), default_skill(4));
  TrainRequest req;
  req.session = "s";
  req.config.epochs = 7;
  req.manifest = manifest_of(world, 40);
  const auto m0 = first.train(req, nullptr);
  req.parent = m0;
  req.manifest = manifest_of(world, 70);
  const auto m1 = first.train(req, nullptr);

  // a new process knows nothing of m1 until it is restored
  SyntheticDetector second(world.view(), default_skill(4));
  TrainRequest next = req;
  next.parent = m1;
  next.manifest = manifest_of(world, 100);
  CHECK(code_of([&] { second.train(next, nullptr); }) == Errc::UnknownModel);
  second.restore_model(m1, manifest_of(world, 70));
  REQUIRE(second.skill_of(m1));
  CHECK(*second.skill_of(m1) == *first.skill_of(m1));
  const std::vector<std::string> ids{"syn_p00000", "syn_p00001", "syn_p00002"};
  CHECK(second.infer(m1, ids) == first.infer(m1, ids));

  const auto a = first.train(next, nullptr);
  const auto b = second.train(next, nullptr);
  CHECK(a.weights_ref == b.weights_ref);
  CHECK(*first.skill_of(a) == *second.skill_of(b));
  // restoring a known model is a no-op
  first.restore_model(m1, manifest_of(world, 10));
  CHECK(*first.skill_of(m1) == *second.skill_of(m1));
}

TEST_CASE("SyntheticDetector: inference contract") {
  const auto world = make_synthetic_world(small_world());
  SyntheticDetector det(world.view(), default_skill(4));
  TrainRequest req;
  req.manifest = manifest_of(world, 40);
  const auto m0 = det.train(req, nullptr);

  const auto pool = world.registry.ids(Split::TrainPool);
  const std::vector<std::string> some(pool.begin(), pool.begin() + 25);
  const auto a = det.infer(m0, some);
  const auto b = det.infer(m0, some);
  CHECK(a == b);
  const std::set<std::string> asked(some.begin(), some.end());
  for (const auto& d : a) {
    CHECK(asked.contains(d.image_id));
    CHECK(d.model_version == 0);
  }
  const std::vector<std::string> unknown{"not-an-image"};
  CHECK(det.infer(m0, unknown).empty());
}

TEST_CASE("SyntheticDetector: one training job per session") {
  const auto world = make_synthetic_world(small_world());
  SyntheticDetector det(world.view(), default_skill(4));
  det.set_epoch_delay(std::chrono::milliseconds(10));
  TrainRequest req;
  req.session = "s1";
  req.manifest = manifest_of(world, 40);
  req.config.epochs = 20;

  std::promise<void> started;
  auto fut = std::async(std::launch::async, [&] {
    bool first = true;
    return det.train(req, [&](const EpochMetrics&) {
      if (first) started.set_value();
      first = false;
    });
  });
  started.get_future().wait();
  CHECK(code_of([&] { det.train(req, nullptr); }) == Errc::ConcurrentTraining);
  TrainRequest other = req;
  other.session = "s2";
  other.config.epochs = 1;
  CHECK(det.train(other, nullptr).version == 0);
  CHECK(fut.get().version == 0);
  // the slot is free again
  req.config.epochs = 1;
  CHECK_NOTHROW(det.train(req, nullptr));
}

TEST_CASE("protocol: encode/decode identity") {
  Rng rng(31);
  for (int i = 0; i < 300; ++i) {
    std::vector<Detection> dets;
    const auto n = rng.below(5);
    for (std::uint64_t k = 0; k < n; ++k) {
      Detection d;
      d.image_id = "img,\"" + std::to_string(i);
      d.class_id = static_cast<int>(rng.below(4));
      d.cx = rng.uniform();
      d.cy = rng.uniform();
      d.w = rng.uniform();
      d.h = rng.uniform();
      d.confidence = rng.uniform();
      d.model_version = 7;
      dets.push_back(d);
    }
    const std::string id = "img,\"" + std::to_string(i);
    const auto line = protocol::encode_detections(id, dets);
    CHECK(line.find('\n') == std::string::npos);
    const auto back = protocol::decode_infer_line(line, 7);
    REQUIRE(std::holds_alternative<protocol::ImageDetections>(back));
    CHECK(std::get<protocol::ImageDetections>(back) == protocol::ImageDetections{id, dets});

    EpochMetrics m{static_cast<int>(rng.below(100)), rng.uniform(), rng.uniform(), rng.uniform(0, 5), rng.uniform(0, 5)};
    const auto t = protocol::decode_train_line(protocol::encode_epoch(m));
    CHECK(std::get<EpochMetrics>(t) == m);
  }
  CHECK(std::get<protocol::TrainDone>(protocol::decode_train_line(R"({"done":true,"version":3})")).version == 3);
  CHECK(std::get<protocol::TrainDone>(protocol::decode_train_line(protocol::encode_done({4, 17}))) ==
        protocol::TrainDone{4, 17});
  const auto err = protocol::decode_train_line(protocol::encode_error({"TrainingFailed", "disk full"}));
  CHECK(std::get<protocol::RemoteError>(err) == protocol::RemoteError{"TrainingFailed", "disk full"});

  const protocol::InferCall ic{"", 2, {"a", "b"}};
  CHECK(std::get<protocol::InferCall>(protocol::decode_request(protocol::encode(ic))) == ic);
  CHECK(protocol::encode(ic) == R"({"images":["a","b"],"model":2,"op":"infer"})");
  const protocol::TrainCall tc{"bob", 1, "/tmp/m.json", {50, 640, 42}};
  CHECK(std::get<protocol::TrainCall>(protocol::decode_request(protocol::encode(tc))) == tc);
  const protocol::TrainCall first{"", std::nullopt, "/tmp/m.json", {}};
  CHECK(std::get<protocol::TrainCall>(protocol::decode_request(protocol::encode(first))) == first);

  std::vector<LabeledImage> manifest{{"a", {{0, 0.5, 0.5, 0.2, 0.2}}}, {"b", {}}};
  CHECK(protocol::decode_manifest(protocol::encode_manifest(manifest)) == manifest);

  for (const char* junk : {"", "[]", "{", R"({"op":"dance"})", R"({"op":"infer","model":"x","images":[]})"}) {
    CHECK(code_of([&] { protocol::decode_request(junk); }) == Errc::ProtocolError);
  }
  for (const char* junk : {"", R"({"image_id":"a"})", R"({"image_id":"a","detections":[{"class":0,"box":[1,2,3],"conf":0.5}]})",
                           R"({"image_id":"a","detections":[{"class":0,"box":[1,2,3,4],"conf":1.5}]})"}) {
    CHECK(code_of([&] { protocol::decode_infer_line(junk, 0); }) == Errc::ProtocolError);
  }
}

TEST_CASE("RemoteDetector against a DetectorServer") {
  const auto world = make_synthetic_world(small_world());
  SyntheticDetector served(world.view(), default_skill(4));
  SyntheticDetector local(world.view(), default_skill(4));
  protocol::DetectorServer server(served);
  const int port = server.start("127.0.0.1", 0);
  testing::TempDir tmp;
  protocol::RemoteDetector remote("127.0.0.1:" + std::to_string(port), tmp.path());

  TrainRequest req;
  req.session = "carol";
  req.manifest = manifest_of(world, 40);
  req.config.epochs = 5;
  std::vector<EpochMetrics> r_stream, l_stream;
  const auto rm = remote.train(req, [&](const EpochMetrics& m) { r_stream.push_back(m); });
  const auto lm = local.train(req, [&](const EpochMetrics& m) { l_stream.push_back(m); });
  CHECK(r_stream == l_stream);
  CHECK(rm.version == 0);
  CHECK(rm.best_epoch == lm.best_epoch);

  const auto pool = world.registry.ids(Split::TrainPool);
  CHECK(remote.infer(rm, pool) == local.infer(lm, pool));

  req.parent = rm;
  const auto rm1 = remote.train(req, nullptr);
  CHECK(rm1.version == 1);
  CHECK(rm1.parent == std::optional<int>(0));

  ModelVersion ghost = rm;
  ghost.weights_ref = "remote/9/carol";
  const std::vector<std::string> one{pool[0]};
  CHECK(code_of([&] { remote.infer(ghost, one); }) == Errc::UnknownModel);
  server.stop();

  protocol::RemoteDetector dead("127.0.0.1:1", tmp.path());
  CHECK(code_of([&] { dead.infer(rm, one); }) == Errc::BackendUnavailable);
}

TEST_CASE("synthetic world: layout, files and reload") {
  auto o = small_world();
  const auto w = make_synthetic_world(o);
  CHECK(w.registry.count(Split::TrainPool) == 120);
  CHECK(w.registry.count(Split::Validation) == 30);
  CHECK(w.registry.count(Split::Test) == 30);
  CHECK(w.embeddings.size() == 120);
  CHECK(w.embeddings.dim() == 16);
  CHECK(validate_splits(w.registry).empty());
  const auto again = make_synthetic_world(o);
  CHECK(again.truth == w.truth);

  testing::TempDir tmp;
  write_synthetic_dataset(w, tmp.path(), o);
  const auto loaded = load_dataset_manifest(tmp.path());
  CHECK(loaded.count(Split::TrainPool) == 120);
  CHECK(loaded.classes() == w.registry.classes());
  const auto* rec = loaded.find("syn_p00003");
  REQUIRE(rec != nullptr);
  CHECK(rec->width == o.image_width);
  CHECK(rec->height == o.image_height);
  const auto gt = load_ground_truth(loaded);
  CHECK(gt.at("syn_p00003").size() == w.truth.at("syn_p00003").size());
  const auto emb = load_embeddings(tmp.path() / "embeddings.txt", tmp.path() / "embedding_ids.txt");
  CHECK(emb.size() == 120);
}
