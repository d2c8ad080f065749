#include "vilod/persistence.hpp"

#include "vilod/error.hpp"

#include <json.hpp>
#include <openssl/evp.h>
#include <sqlite3.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace vilod {

using nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(Errc::StorageError, "SHA-256 failed");
  }
  static const char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

// --- snapshot JSON ---------------------------------------------------------------

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json opt(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

template <class T>
std::optional<T> get_opt(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

json box_json(const GroundTruthBox& b) { return json::array({b.class_id, b.cx, b.cy, b.w, b.h}); }
GroundTruthBox box_from(const json& j) {
  return {j.at(0).get<int>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>(),
          j.at(4).get<double>()};
}

json model_json(const ModelVersion& m) {
  return {{"version", m.version},
          {"parent", opt(m.parent)},
          {"weights_ref", m.weights_ref},
          {"train_config",
           {{"epochs", m.train_config.epochs}, {"image_size", m.train_config.image_size}, {"seed", m.train_config.seed}}},
          {"created_at", m.created_at},
          {"best_epoch", m.best_epoch}};
}
ModelVersion model_from(const json& j) {
  ModelVersion m;
  m.version = j.at("version").get<int>();
  m.parent = get_opt<int>(j.at("parent"));
  m.weights_ref = j.at("weights_ref").get<std::string>();
  const auto& tc = j.at("train_config");
  m.train_config = {tc.at("epochs").get<int>(), tc.at("image_size").get<int>(), tc.at("seed").get<std::uint64_t>()};
  m.created_at = j.at("created_at").get<std::string>();
  m.best_epoch = j.at("best_epoch").get<int>();
  return m;
}

json detection_json(const Detection& d) {
  return json::array({d.image_id, d.class_id, d.cx, d.cy, d.w, d.h, d.confidence, d.model_version});
}
Detection detection_from(const json& j) {
  Detection d;
  d.image_id = j.at(0).get<std::string>();
  d.class_id = j.at(1).get<int>();
  d.cx = j.at(2).get<double>();
  d.cy = j.at(3).get<double>();
  d.w = j.at(4).get<double>();
  d.h = j.at(5).get<double>();
  d.confidence = j.at(6).get<double>();
  d.model_version = j.at(7).get<int>();
  return d;
}

json report_json(const EvalReport& r) {
  json per = json::array();
  for (const auto& c : r.per_class) per.push_back({{"class_id", c.class_id}, {"ap50", opt(c.ap50)}, {"ap50_95", opt(c.ap50_95)}});
  return {{"map50", r.map50},         {"map75", r.map75},   {"map50_95", r.map50_95},
          {"precision", r.precision}, {"recall", r.recall}, {"confidence_threshold", r.confidence_threshold},
          {"per_class", per}};
}
EvalReport report_from(const json& j) {
  EvalReport r;
  r.map50 = j.at("map50").get<double>();
  r.map75 = j.at("map75").get<double>();
  r.map50_95 = j.at("map50_95").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.confidence_threshold = j.at("confidence_threshold").get<double>();
  for (const auto& c : j.at("per_class")) {
    r.per_class.push_back({c.at("class_id").get<int>(), get_opt<double>(c.at("ap50")), get_opt<double>(c.at("ap50_95"))});
  }
  return r;
}

json heatmap_json(const HeatmapGrid& g) {
  return {{"x_min", g.x_min}, {"x_max", g.x_max},   {"y_min", g.y_min},       {"y_max", g.y_max},
          {"nx", g.nx},       {"ny", g.ny},         {"values", g.values},     {"bandwidth", g.bandwidth},
          {"degenerate", g.degenerate}, {"colormap", g.colormap_name}};
}
HeatmapGrid heatmap_from(const json& j) {
  HeatmapGrid g;
  g.x_min = j.at("x_min").get<double>();
  g.x_max = j.at("x_max").get<double>();
  g.y_min = j.at("y_min").get<double>();
  g.y_max = j.at("y_max").get<double>();
  g.nx = j.at("nx").get<std::size_t>();
  g.ny = j.at("ny").get<std::size_t>();
  g.values = j.at("values").get<std::vector<double>>();
  g.bandwidth = j.at("bandwidth").get<std::array<double, 3>>();
  g.degenerate = j.at("degenerate").get<bool>();
  g.colormap_name = j.at("colormap").get<std::string>();
  if (g.values.size() != g.nx * g.ny) throw Error(Errc::InvalidArgument, "heatmap size mismatch");
  return g;
}

json state_json(const IterationState& st) {
  json annotations = json::object();
  for (const auto& [id, boxes] : st.annotations) {
    json arr = json::array();
    for (const auto& b : boxes) arr.push_back(box_json(b));
    annotations[id] = arr;
  }
  json labeled = json::array();
  for (const auto& id : st.labeled_ids) labeled.push_back({id, st.labeled_iteration.at(id)});
  json lineage = json::array();
  for (const auto& m : st.lineage) lineage.push_back(model_json(m));
  json suggestions = json::array();
  for (const auto& s : st.suggestions) suggestions.push_back({s.image_id, s.avg_conf});
  json dets = json::array();
  for (const auto& d : st.pool_detections) dets.push_back(detection_json(d));
  json traj = json::array();
  for (const auto& r : st.trajectory) traj.push_back(report_json(r));
  return {{"iteration", st.iteration},
          {"phase", phase_name(st.phase)},
          {"labeled", labeled},
          {"pending", st.pending_ids},
          {"annotations", annotations},
          {"current_model", st.current_model ? model_json(*st.current_model) : json(nullptr)},
          {"lineage", lineage},
          {"suggestions", suggestions},
          {"pool_detections", dets},
          {"heatmap", st.heatmap ? heatmap_json(*st.heatmap) : json(nullptr)},
          {"trajectory", traj},
          {"fault", st.fault ? json{{"iteration", st.fault->iteration}, {"code", st.fault->code},
                                    {"message", st.fault->message}}
                             : json(nullptr)}};
}

IterationState state_from(const json& j) {
  IterationState st;
  st.iteration = j.at("iteration").get<int>();
  const auto phase = parse_phase(j.at("phase").get<std::string>());
  if (!phase) throw Error(Errc::InvalidArgument, "unknown phase in snapshot");
  st.phase = *phase;
  for (const auto& e : j.at("labeled")) {
    const auto id = e.at(0).get<std::string>();
    st.labeled_ids.push_back(id);
    st.labeled_iteration.emplace(id, e.at(1).get<int>());
  }
  st.pending_ids = j.at("pending").get<std::vector<std::string>>();
  for (const auto& [id, arr] : j.at("annotations").items()) {
    auto& boxes = st.annotations[id];
    for (const auto& b : arr) boxes.push_back(box_from(b));
  }
  if (!j.at("current_model").is_null()) st.current_model = model_from(j.at("current_model"));
  for (const auto& m : j.at("lineage")) st.lineage.push_back(model_from(m));
  for (const auto& s : j.at("suggestions")) st.suggestions.push_back({s.at(0).get<std::string>(), s.at(1).get<double>()});
  for (const auto& d : j.at("pool_detections")) st.pool_detections.push_back(detection_from(d));
  if (!j.at("heatmap").is_null()) st.heatmap = heatmap_from(j.at("heatmap"));
  for (const auto& r : j.at("trajectory")) st.trajectory.push_back(report_from(r));
  if (const auto& f = j.at("fault"); !f.is_null()) {
    st.fault = Fault{f.at("iteration").get<int>(), f.at("code").get<std::string>(), f.at("message").get<std::string>()};
  }
  return st;
}

} // namespace

std::string snapshot_to_json(const SessionSnapshot& s) {
  return json{{"format", 1}, {"config", format_session_config(s.config)}, {"state", state_json(s.state)}}.dump();
}

SessionSnapshot snapshot_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    if (j.at("format").get<int>() != 1) throw Error(Errc::InvalidArgument, "unsupported snapshot format");
    return {parse_session_config(j.at("config").get<std::string>()), state_from(j.at("state"))};
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("bad snapshot: ") + e.what());
  }
}

// --- SQLite ------------------------------------------------------------------------

namespace {

class Stmt {
public:
  Stmt(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &st_, nullptr) != SQLITE_OK) fail();
  }
  ~Stmt() { sqlite3_finalize(st_); }
  Stmt(const Stmt&) = delete;
  Stmt& operator=(const Stmt&) = delete;

  Stmt& bind(int i, std::int64_t v) { return check(sqlite3_bind_int64(st_, i, v)); }
  Stmt& bind(int i, int v) { return check(sqlite3_bind_int64(st_, i, v)); }
  Stmt& bind(int i, double v) { return check(sqlite3_bind_double(st_, i, v)); }
  Stmt& bind(int i, std::string_view v) {
    return check(sqlite3_bind_text(st_, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
  }
  Stmt& bind_null(int i) { return check(sqlite3_bind_null(st_, i)); }

  // true while rows remain
  bool step() {
    const int rc = sqlite3_step(st_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    fail();
  }
  void run() {
    while (step()) {
    }
  }
  void reset() {
    sqlite3_reset(st_);
    sqlite3_clear_bindings(st_);
  }

  std::int64_t i64(int c) const { return sqlite3_column_int64(st_, c); }
  int i32(int c) const { return sqlite3_column_int(st_, c); }
  double f64(int c) const { return sqlite3_column_double(st_, c); }
  bool null(int c) const { return sqlite3_column_type(st_, c) == SQLITE_NULL; }
  std::string text(int c) const {
    const auto* p = sqlite3_column_text(st_, c);
    return p ? std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(sqlite3_column_bytes(st_, c)))
             : std::string();
  }

private:
  sqlite3* db_;
  sqlite3_stmt* st_ = nullptr;

  Stmt& check(int rc) {
    if (rc != SQLITE_OK) fail();
    return *this;
  }
  [[noreturn]] void fail() const { throw Error(Errc::StorageError, sqlite3_errmsg(db_)); }
};

void exec(sqlite3* db, const char* sql) {
  char* err = nullptr;
  if (sqlite3_exec(db, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    const std::string msg = err ? err : "sqlite error";
    sqlite3_free(err);
    throw Error(Errc::StorageError, msg);
  }
}

class Transaction {
public:
  explicit Transaction(sqlite3* db) : db_(db) { exec(db_, "BEGIN IMMEDIATE"); }
  ~Transaction() {
    if (!done_) sqlite3_exec(db_, "ROLLBACK", nullptr, nullptr, nullptr);
  }
  void commit() {
    exec(db_, "COMMIT");
    done_ = true;
  }

private:
  sqlite3* db_;
  bool done_ = false;
};

const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS user (
  user_id INTEGER PRIMARY KEY,
  name TEXT NOT NULL UNIQUE,
  token_hash TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS image (
  image_id TEXT PRIMARY KEY,
  split TEXT NOT NULL,
  width INTEGER NOT NULL,
  height INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS model (
  user_id INTEGER NOT NULL REFERENCES user(user_id),
  version INTEGER NOT NULL,
  parent INTEGER,
  weights_ref TEXT NOT NULL,
  created_at TEXT NOT NULL,
  epochs INTEGER NOT NULL,
  image_size INTEGER NOT NULL,
  train_seed INTEGER NOT NULL,
  best_epoch INTEGER NOT NULL,
  PRIMARY KEY (user_id, version),
  FOREIGN KEY (user_id, parent) REFERENCES model(user_id, version)
);
CREATE TABLE IF NOT EXISTS annotation (
  id INTEGER PRIMARY KEY,
  user_id INTEGER NOT NULL REFERENCES user(user_id),
  image_id TEXT NOT NULL REFERENCES image(image_id),
  iteration INTEGER NOT NULL,
  class_id INTEGER,
  cx REAL, cy REAL, w REAL, h REAL
);
CREATE INDEX IF NOT EXISTS annotation_user_image ON annotation(user_id, image_id);
CREATE TABLE IF NOT EXISTS detection (
  id INTEGER PRIMARY KEY,
  user_id INTEGER NOT NULL,
  model_version INTEGER NOT NULL,
  image_id TEXT NOT NULL REFERENCES image(image_id),
  class_id INTEGER NOT NULL,
  cx REAL NOT NULL, cy REAL NOT NULL, w REAL NOT NULL, h REAL NOT NULL,
  confidence REAL NOT NULL,
  FOREIGN KEY (user_id, model_version) REFERENCES model(user_id, version)
);
CREATE INDEX IF NOT EXISTS detection_model ON detection(user_id, model_version);
)sql";

bool plain_name(std::string_view name) {
  if (name.empty() || name == "." || name == "..") return false;
  return std::none_of(name.begin(), name.end(), [](char c) { return c == '/' || c == '\\' || c == '\0'; });
}

void write_atomic(const fs::path& path, std::string_view text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(Errc::StorageError, "cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(Errc::StorageError, "cannot replace " + path.string() + ": " + ec.message());
}

} // namespace

struct EntityStore::Db {
  sqlite3* handle = nullptr;
  ~Db() { sqlite3_close(handle); }
};

EntityStore::EntityStore(fs::path root) : root_(std::move(root)), db_(std::make_unique<Db>()) {
  fs::create_directories(root_ / "runs");
  const auto path = root_ / "vilod.db";
  if (sqlite3_open(path.c_str(), &db_->handle) != SQLITE_OK) {
    throw Error(Errc::StorageError, "cannot open " + path.string());
  }
  sqlite3_busy_timeout(db_->handle, 5000);
  exec(db_->handle, "PRAGMA foreign_keys = ON");
  exec(db_->handle, kSchema);
}

EntityStore::~EntityStore() = default;

fs::path EntityStore::user_dir(std::string_view user) const {
  if (!plain_name(user)) throw Error(Errc::InvalidArgument, "bad user name");
  return root_ / "runs" / std::string(user);
}

User EntityStore::add_user(std::string_view name, std::string_view token) {
  if (!plain_name(name)) throw Error(Errc::InvalidArgument, "bad user name");
  if (token.empty()) throw Error(Errc::InvalidArgument, "empty token");
  std::lock_guard lock(mu_);
  if (Stmt q(db_->handle, "SELECT 1 FROM user WHERE name = ?"); q.bind(1, name).step()) {
    throw Error(Errc::InvalidArgument, "user exists: " + std::string(name));
  }
  User u;
  u.name = name;
  u.token_hash = sha256_hex(token);
  Stmt(db_->handle, "INSERT INTO user(name, token_hash) VALUES(?, ?)").bind(1, name).bind(2, u.token_hash).run();
  u.user_id = sqlite3_last_insert_rowid(db_->handle);
  return u;
}

std::optional<User> EntityStore::find_user(std::string_view name) const {
  std::lock_guard lock(mu_);
  Stmt q(db_->handle, "SELECT user_id, name, token_hash FROM user WHERE name = ?");
  if (!q.bind(1, name).step()) return std::nullopt;
  return User{q.i64(0), q.text(1), q.text(2)};
}

std::optional<User> EntityStore::user_by_token(std::string_view token) const {
  std::lock_guard lock(mu_);
  Stmt q(db_->handle, "SELECT user_id, name, token_hash FROM user WHERE token_hash = ?");
  if (!q.bind(1, sha256_hex(token)).step()) return std::nullopt;
  return User{q.i64(0), q.text(1), q.text(2)};
}

std::int64_t EntityStore::user_id(std::string_view user) const {
  Stmt q(db_->handle, "SELECT user_id FROM user WHERE name = ?");
  if (!q.bind(1, user).step()) throw Error(Errc::InvalidArgument, "unknown user " + std::string(user));
  return q.i64(0);
}

std::size_t EntityStore::register_images(const DatasetRegistry& registry) {
  std::lock_guard lock(mu_);
  Transaction tx(db_->handle);
  Stmt up(db_->handle,
          "INSERT INTO image(image_id, split, width, height) VALUES(?, ?, ?, ?) "
          "ON CONFLICT(image_id) DO UPDATE SET split = excluded.split, width = excluded.width, height = excluded.height");
  std::size_t n = 0;
  for (const auto& r : registry.images()) {
    up.reset();
    up.bind(1, r.image_id).bind(2, split_name(r.split)).bind(3, r.width).bind(4, r.height).run();
    ++n;
  }
  tx.commit();
  return n;
}

std::optional<StoredImage> EntityStore::image(std::string_view image_id) const {
  std::lock_guard lock(mu_);
  Stmt q(db_->handle, "SELECT image_id, split, width, height FROM image WHERE image_id = ?");
  if (!q.bind(1, image_id).step()) return std::nullopt;
  return StoredImage{q.text(0), parse_split(q.text(1)).value_or(Split::TrainPool), q.i32(2), q.i32(3)};
}

void EntityStore::record_model(std::string_view user, const ModelVersion& m) {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  Transaction tx(db_->handle);
  if (m.parent) {
    Stmt q(db_->handle, "SELECT 1 FROM model WHERE user_id = ? AND version = ?");
    if (!q.bind(1, uid).bind(2, *m.parent).step()) {
      throw Error(Errc::UnknownModel, "parent model " + std::to_string(*m.parent) + " is not stored");
    }
  }
  Stmt ins(db_->handle,
           "INSERT INTO model(user_id, version, parent, weights_ref, created_at, epochs, image_size, train_seed, best_epoch) "
           "VALUES(?, ?, ?, ?, ?, ?, ?, ?, ?) ON CONFLICT(user_id, version) DO UPDATE SET parent = excluded.parent, "
           "weights_ref = excluded.weights_ref, created_at = excluded.created_at, epochs = excluded.epochs, "
           "image_size = excluded.image_size, train_seed = excluded.train_seed, best_epoch = excluded.best_epoch");
  ins.bind(1, uid).bind(2, m.version);
  if (m.parent) ins.bind(3, *m.parent);
  else ins.bind_null(3);
  ins.bind(4, m.weights_ref).bind(5, m.created_at).bind(6, m.train_config.epochs).bind(7, m.train_config.image_size);
  ins.bind(8, static_cast<std::int64_t>(m.train_config.seed)).bind(9, m.best_epoch).run();
  tx.commit();
}

std::vector<ModelVersion> EntityStore::models(std::string_view user) const {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  Stmt q(db_->handle,
         "SELECT version, parent, weights_ref, created_at, epochs, image_size, train_seed, best_epoch "
         "FROM model WHERE user_id = ? ORDER BY version");
  q.bind(1, uid);
  std::vector<ModelVersion> out;
  while (q.step()) {
    ModelVersion m;
    m.version = q.i32(0);
    if (!q.null(1)) m.parent = q.i32(1);
    m.weights_ref = q.text(2);
    m.created_at = q.text(3);
    m.train_config = {q.i32(4), q.i32(5), static_cast<std::uint64_t>(q.i64(6))};
    m.best_epoch = q.i32(7);
    out.push_back(std::move(m));
  }
  return out;
}

std::size_t EntityStore::record_detections(std::string_view user, int model_version,
                                           std::span<const Detection> detections) {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  Transaction tx(db_->handle);
  {
    Stmt q(db_->handle, "SELECT 1 FROM model WHERE user_id = ? AND version = ?");
    if (!q.bind(1, uid).bind(2, model_version).step()) {
      throw Error(Errc::UnknownModel, "model " + std::to_string(model_version) + " is not stored");
    }
  }
  Stmt known(db_->handle, "SELECT 1 FROM image WHERE image_id = ?");
  std::set<std::string_view> checked;
  for (const auto& d : detections) {
    if (!checked.insert(d.image_id).second) continue;
    known.reset();
    if (!known.bind(1, d.image_id).step()) throw Error(Errc::UnknownImage, "unknown image " + d.image_id);
  }
  Stmt(db_->handle, "DELETE FROM detection WHERE user_id = ? AND model_version = ?").bind(1, uid).bind(2, model_version).run();
  Stmt ins(db_->handle,
           "INSERT INTO detection(user_id, model_version, image_id, class_id, cx, cy, w, h, confidence) "
           "VALUES(?, ?, ?, ?, ?, ?, ?, ?, ?)");
  for (const auto& d : detections) {
    ins.reset();
    ins.bind(1, uid).bind(2, model_version).bind(3, d.image_id).bind(4, d.class_id);
    ins.bind(5, d.cx).bind(6, d.cy).bind(7, d.w).bind(8, d.h).bind(9, d.confidence).run();
  }
  tx.commit();
  return detections.size();
}

std::vector<Detection> EntityStore::detections(std::string_view user, int model_version) const {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  Stmt q(db_->handle,
         "SELECT image_id, class_id, cx, cy, w, h, confidence FROM detection "
         "WHERE user_id = ? AND model_version = ? ORDER BY id");
  q.bind(1, uid).bind(2, model_version);
  std::vector<Detection> out;
  while (q.step()) {
    out.push_back({q.text(0), q.i32(1), q.f64(2), q.f64(3), q.f64(4), q.f64(5), q.f64(6), model_version});
  }
  return out;
}

void EntityStore::write_label_file(std::string_view user, std::int64_t uid, std::string_view image_id) {
  Stmt q(db_->handle,
         "SELECT class_id, cx, cy, w, h FROM annotation WHERE user_id = ? AND image_id = ? ORDER BY id");
  q.bind(1, uid).bind(2, image_id);
  bool any = false;
  std::vector<GroundTruthBox> boxes;
  while (q.step()) {
    any = true;
    if (!q.null(0)) boxes.push_back({q.i32(0), q.f64(1), q.f64(2), q.f64(3), q.f64(4)});
  }
  const auto path = user_dir(user) / "labels" / (std::string(image_id) + ".txt");
  if (!any) {
    std::error_code ec;
    fs::remove(path, ec);
    return;
  }
  const auto text = serialize_yolo_label(boxes);
  write_atomic(path, boxes.empty() ? text : text + "\n");
}

std::vector<std::int64_t> EntityStore::record_annotation(std::string_view user, std::string_view image_id,
                                                         int iteration, std::span<const GroundTruthBox> boxes) {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  {
    Stmt q(db_->handle, "SELECT split FROM image WHERE image_id = ?");
    if (!q.bind(1, image_id).step()) throw Error(Errc::UnknownImage, "unknown image " + std::string(image_id));
    if (q.text(0) != split_name(Split::TrainPool)) {
      throw Error(Errc::NotSelectable, std::string(image_id) + " is not a pool image");
    }
  }
  Transaction tx(db_->handle);
  Stmt(db_->handle, "DELETE FROM annotation WHERE user_id = ? AND image_id = ? AND iteration = ?")
      .bind(1, uid)
      .bind(2, image_id)
      .bind(3, iteration)
      .run();
  Stmt ins(db_->handle,
           "INSERT INTO annotation(user_id, image_id, iteration, class_id, cx, cy, w, h) VALUES(?, ?, ?, ?, ?, ?, ?, ?)");
  std::vector<std::int64_t> ids;
  auto insert = [&](const GroundTruthBox* b) {
    ins.reset();
    ins.bind(1, uid).bind(2, image_id).bind(3, iteration);
    if (b) {
      ins.bind(4, b->class_id).bind(5, b->cx).bind(6, b->cy).bind(7, b->w).bind(8, b->h);
    } else {
      for (int c = 4; c <= 8; ++c) ins.bind_null(c);
    }
    ins.run();
    ids.push_back(sqlite3_last_insert_rowid(db_->handle));
  };
  if (boxes.empty()) insert(nullptr);
  for (const auto& b : boxes) insert(&b);
  write_label_file(user, uid, image_id);
  tx.commit();
  return ids;
}

std::size_t EntityStore::delete_annotation(std::string_view user, std::string_view image_id, int iteration) {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  Transaction tx(db_->handle);
  Stmt(db_->handle, "DELETE FROM annotation WHERE user_id = ? AND image_id = ? AND iteration = ?")
      .bind(1, uid)
      .bind(2, image_id)
      .bind(3, iteration)
      .run();
  const auto removed = static_cast<std::size_t>(sqlite3_changes(db_->handle));
  write_label_file(user, uid, image_id);
  tx.commit();
  return removed;
}

std::vector<StoredAnnotation> EntityStore::annotations(std::string_view user) const {
  std::lock_guard lock(mu_);
  const auto uid = user_id(user);
  Stmt q(db_->handle,
         "SELECT id, image_id, iteration, class_id, cx, cy, w, h FROM annotation WHERE user_id = ? ORDER BY id");
  q.bind(1, uid);
  std::vector<StoredAnnotation> out;
  while (q.step()) {
    StoredAnnotation a;
    a.id = q.i64(0);
    a.image_id = q.text(1);
    a.iteration = q.i32(2);
    if (!q.null(3)) a.box = GroundTruthBox{q.i32(3), q.f64(4), q.f64(5), q.f64(6), q.f64(7)};
    out.push_back(std::move(a));
  }
  return out;
}

void EntityStore::snapshot_session(std::string_view user, const SessionSnapshot& snapshot) {
  write_atomic(user_dir(user) / "session.snap", snapshot_to_json(snapshot));
}

SessionSnapshot EntityStore::restore_session(std::string_view user) const {
  const auto path = user_dir(user) / "session.snap";
  if (!fs::exists(path)) throw Error(Errc::NoSnapshot, "no snapshot for " + std::string(user));
  return snapshot_from_json(read_text_file(path));
}

void EntityStore::write_trajectory(std::string_view user, std::span<const TrajectoryRow> rows) {
  write_atomic(user_dir(user) / "trajectory.csv", trajectory_to_csv(rows));
}

void EntityStore::write_projection(std::string_view user, std::span<const ProjectionPoint> points) {
  write_atomic(user_dir(user) / "projection.csv", projection_to_csv(points));
}

std::optional<std::vector<ProjectionPoint>> EntityStore::read_projection(std::string_view user) const {
  const auto path = user_dir(user) / "projection.csv";
  if (!fs::exists(path)) return std::nullopt;
  return projection_from_csv(read_text_file(path));
}

std::vector<std::string> EntityStore::integrity_violations() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  {
    Stmt q(db_->handle, "PRAGMA foreign_key_check");
    while (q.step()) out.push_back("foreign key violation in " + q.text(0) + " row " + std::to_string(q.i64(1)));
  }
  Stmt users(db_->handle, "SELECT user_id, name FROM user");
  while (users.step()) {
    const auto uid = users.i64(0);
    const auto name = users.text(1);
    std::set<std::string> annotated;
    Stmt q(db_->handle, "SELECT DISTINCT image_id FROM annotation WHERE user_id = ?");
    q.bind(1, uid);
    while (q.step()) annotated.insert(q.text(0));
    std::set<std::string> files;
    const auto dir = root_ / "runs" / name / "labels";
    if (fs::exists(dir)) {
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".txt") files.insert(e.path().stem().string());
      }
    }
    if (files != annotated) out.push_back("label files of " + name + " differ from its annotations");
  }
  return out;
}

} // namespace vilod
