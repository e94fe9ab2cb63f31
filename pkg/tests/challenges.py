"""Hand-written extraction challenges: wildcards, aliases, nesting."""

EMPLOYEE_DDL = "CREATE TABLE employees (employee_id INT, firstname TEXT, lastname TEXT, salary INT);"
CONCAT_QUERY = "SELECT employee_id, CONCAT(firstname, lastname) FROM employees WHERE MAX(salary) > 1000000"

COMPANY_DDL = """
CREATE TABLE employees (
  id INT PRIMARY KEY,
  firstname VARCHAR(32),
  lastname VARCHAR(32),
  salary INT,
  dept_id INT,
  manager_id INT,
  hired DATE
);
CREATE TABLE departments (id INT PRIMARY KEY, name VARCHAR(32), budget INT, location_id INT);
CREATE TABLE locations (id INT PRIMARY KEY, city VARCHAR(32), country VARCHAR(32));
CREATE TABLE projects (id INT PRIMARY KEY, title VARCHAR(64), dept_id INT, lead_id INT, cost INT);
"""

WILDCARD = [
    "SELECT * FROM employees",
    "SELECT * FROM locations WHERE country = 'NO'",
    "SELECT * FROM departments, locations WHERE location_id = locations.id",
    "SELECT d.*, l.city FROM departments d JOIN locations l ON d.location_id = l.id",
    "SELECT e.* FROM employees e WHERE e.salary > 5000 ORDER BY e.lastname",
    "SELECT COUNT(*) FROM projects WHERE cost > 100",
    "SELECT * FROM (SELECT id, title FROM projects WHERE cost < 10) cheap",
    "SELECT p.*, d.name FROM projects p INNER JOIN departments d ON p.dept_id = d.id",
]

ALIASES = [
    "SELECT e.firstname AS fn, e.lastname AS ln FROM employees AS e",
    "SELECT salary * 12 AS annual FROM employees ORDER BY annual DESC",
    "SELECT dept_id AS d, COUNT(id) AS n FROM employees GROUP BY d HAVING n > 3",
    "SELECT firstname AS fn FROM employees WHERE fn LIKE 'A%'",
    "SELECT UPPER(l.city) town FROM locations l WHERE l.country <> 'SE'",
    "SELECT boss.firstname, staff.firstname FROM employees boss JOIN employees staff ON staff.manager_id = boss.id",
    "SELECT d.name AS dept, SUM(p.cost) AS spend FROM departments d, projects p "
    "WHERE p.dept_id = d.id GROUP BY dept ORDER BY spend",
    "SELECT x.t FROM (SELECT title AS t, cost AS c FROM projects) AS x WHERE x.c > 9",
    "SELECT CASE WHEN salary > 9000 THEN 'high' ELSE 'low' END AS band FROM employees WHERE dept_id = 2",
    "SELECT e.id, e.salary AS pay FROM employees e WHERE pay BETWEEN 10 AND 20",
    "SELECT name nm, budget FROM departments WHERE budget IS NOT NULL ORDER BY nm",
    "SELECT A FROM (SELECT id AS A FROM employees)",
]

NESTED = [
    "SELECT x FROM (SELECT y AS x FROM (SELECT firstname AS y FROM employees WHERE salary > 10) a) b",
    "SELECT name FROM departments WHERE id IN (SELECT dept_id FROM employees WHERE manager_id IN "
    "(SELECT id FROM employees WHERE salary > (SELECT AVG(salary) FROM employees)))",
    "SELECT e.firstname FROM employees e WHERE EXISTS (SELECT 1 FROM projects p WHERE p.lead_id = e.id "
    "AND p.dept_id IN (SELECT id FROM departments WHERE location_id IN (SELECT id FROM locations WHERE city = 'Oslo')))",
    "SELECT t.c FROM (SELECT u.city AS c FROM (SELECT v.city FROM (SELECT city, country FROM locations) v "
    "WHERE v.country = 'FI') u) t",
    "SELECT title, (SELECT name FROM departments WHERE departments.id = projects.dept_id) AS owner FROM projects",
    "SELECT firstname FROM employees WHERE dept_id = (SELECT dept_id FROM projects WHERE cost = "
    "(SELECT MAX(cost) FROM projects WHERE lead_id IN (SELECT id FROM employees WHERE hired > '2020-01-01')))",
    "SELECT q.n FROM (SELECT r.n FROM (SELECT s.name AS n FROM departments s WHERE s.budget > 0) r) q ORDER BY q.n",
    "SELECT lastname FROM employees WHERE id NOT IN (SELECT lead_id FROM projects WHERE dept_id IN "
    "(SELECT id FROM departments WHERE budget < (SELECT AVG(budget) FROM departments)))",
    "SELECT * FROM (SELECT * FROM (SELECT id, city FROM locations) a) b",
    "SELECT m.k FROM (SELECT dept_id AS k, MAX(salary) AS top FROM employees GROUP BY dept_id) m "
    "WHERE m.top > (SELECT AVG(cost) FROM (SELECT cost FROM projects WHERE dept_id > 1) pc)",
]

WRITES = [
    "UPDATE employees SET salary = salary + 100 WHERE dept_id = 3",
    "UPDATE projects p SET p.cost = 0, title = 'void' WHERE p.lead_id = 7",
    "INSERT INTO locations (id, city, country) VALUES (9, 'Bergen', 'NO')",
    "INSERT INTO locations VALUES (10, 'Turku', 'FI')",
]

CHALLENGES = WILDCARD + ALIASES + NESTED + WRITES
